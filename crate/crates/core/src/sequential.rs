//! One interface over every continual merger, so callers can drive OPCM and
//! the baselines through the same loop.

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineState, TiesConfig};
use crate::error::{Error, Result};
use crate::merge::{MergeConfig, MergeState, StepRecord};
use crate::tensor::Checkpoint;

/// A merge method together with its configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergerSpec {
    Opcm(MergeConfig),
    Swa,
    Ta { lambda: f64 },
    Ties(TiesConfig),
}

impl MergerSpec {
    /// Short identifier, as used on the command line and in reports.
    pub fn name(&self) -> &'static str {
        match self {
            MergerSpec::Opcm(_) => "opcm",
            MergerSpec::Swa => "swa",
            MergerSpec::Ta { .. } => "ta",
            MergerSpec::Ties(_) => "ties",
        }
    }

    pub fn start(&self, theta0: &Checkpoint, theta1: &Checkpoint) -> Result<Merger> {
        Ok(match *self {
            MergerSpec::Opcm(cfg) => {
                Merger::Opcm(MergeState::init(theta0.clone(), theta1.clone(), cfg)?)
            }
            MergerSpec::Swa => Merger::Baseline(BaselineState::swa(theta0.clone(), theta1)?),
            MergerSpec::Ta { lambda } => {
                Merger::Baseline(BaselineState::cta(theta0.clone(), theta1, lambda)?)
            }
            MergerSpec::Ties(cfg) => {
                Merger::Baseline(BaselineState::cties(theta0.clone(), theta1, cfg)?)
            }
        })
    }

    /// Merges `experts` in order and returns the final state.
    pub fn run<'a, I>(&self, theta0: &Checkpoint, experts: I) -> Result<Merger>
    where
        I: IntoIterator<Item = &'a Checkpoint>,
    {
        let mut it = experts.into_iter();
        let first = it.next().ok_or(Error::EmptySequence)?;
        let mut m = self.start(theta0, first)?;
        for e in it {
            m.step(e)?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub enum Merger {
    Opcm(MergeState),
    Baseline(BaselineState),
}

impl Merger {
    pub fn step(&mut self, theta_t: &Checkpoint) -> Result<()> {
        match self {
            Merger::Opcm(s) => s.merge_step(theta_t).map(|_| ()),
            Merger::Baseline(s) => s.merge_step(theta_t),
        }
    }

    pub fn merged(&self) -> &Checkpoint {
        match self {
            Merger::Opcm(s) => s.merged(),
            Merger::Baseline(s) => s.merged(),
        }
    }

    pub fn into_model(self) -> Checkpoint {
        match self {
            Merger::Opcm(s) => s.into_model(),
            Merger::Baseline(s) => s.into_model(),
        }
    }

    /// Step log; only OPCM keeps one.
    pub fn log(&self) -> &[StepRecord] {
        match self {
            Merger::Opcm(s) => s.log(),
            Merger::Baseline(_) => &[],
        }
    }
}

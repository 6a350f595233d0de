//! Continual baselines: running weight average (SWA), continual task
//! arithmetic and continual Ties-Merging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_schema, Checkpoint, ParamSet, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Swa,
    Cta,
    CTies,
}

/// Task-arithmetic scale used when none is given: 0.3 up to eight tasks,
/// 0.1 beyond.
pub fn default_lambda(num_tasks: usize) -> f64 {
    if num_tasks <= 8 {
        0.3
    } else {
        0.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiesConfig {
    /// Fraction of largest-magnitude entries kept per task vector.
    pub trim_fraction: f64,
    pub lambda_scale: f64,
}

impl Default for TiesConfig {
    fn default() -> Self {
        Self {
            trim_fraction: 0.2,
            lambda_scale: 0.3,
        }
    }
}

impl TiesConfig {
    pub fn new(trim_fraction: f64, lambda_scale: f64) -> Result<Self> {
        let cfg = Self {
            trim_fraction,
            lambda_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "trim fraction must lie in (0, 1], got {}",
                self.trim_fraction
            )));
        }
        validate_lambda(self.lambda_scale)
    }
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    Ok(())
}

/// How many entries survive trimming: `ceil(fraction · n)`, at least one.
fn keep_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // The slack keeps e.g. 0.2·5 from rounding up to 2.
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Zeroes all but the top `fraction` entries by magnitude. Equal magnitudes
/// keep the earlier index.
pub fn trim(values: &[f64], fraction: f64) -> Vec<f64> {
    let k = keep_count(values.len(), fraction);
    if k == values.len() {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.select_nth_unstable_by(k, |&a, &b| {
        values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    out
}

/// Elects a sign per coordinate (sign of the sum; zero counts as positive)
/// and zeroes every entry that disagrees with it.
fn elect_and_select(trimmed: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = trimmed.first().map_or(0, Vec::len);
    let positive: Vec<bool> = (0..n)
        .map(|i| trimmed.iter().map(|v| v[i]).sum::<f64>() >= 0.0)
        .collect();
    trimmed
        .iter()
        .map(|v| {
            v.iter()
                .zip(&positive)
                .map(|(&x, &pos)| {
                    if (pos && x > 0.0) || (!pos && x < 0.0) {
                        x
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn flatten<P: ParamSet>(p: &P) -> Vec<f64> {
    p.flat_values().collect()
}

/// Trim, elect and select, returning each task vector's surviving entries
/// (flattened in lexicographic name order).
pub fn ties_select(tvs: &[&TaskVector], trim_fraction: f64) -> Result<Vec<Vec<f64>>> {
    if let Some((first, rest)) = tvs.split_first() {
        for tv in rest {
            check_schema(first.params(), tv.params())?;
        }
    }
    let trimmed: Vec<Vec<f64>> = tvs
        .iter()
        .map(|tv| trim(&flatten(*tv), trim_fraction))
        .collect();
    Ok(elect_and_select(&trimmed))
}

/// One-shot Ties-Merging of task vectors: each coordinate is the mean of the
/// selected (sign-agreeing, nonzero) entries, or zero if none survive.
pub fn ties_combine(tvs: &[TaskVector], cfg: &TiesConfig) -> Result<TaskVector> {
    cfg.validate()?;
    let first = tvs.first().ok_or_else(|| {
        Error::InvalidConfig("ties_combine needs at least one task vector".into())
    })?;
    let refs: Vec<&TaskVector> = tvs.iter().collect();
    let selected = ties_select(&refs, cfg.trim_fraction)?;
    let n = first.numel();
    let merged: Vec<f64> = (0..n)
        .map(|i| {
            let (sum, count) = selected
                .iter()
                .map(|v| v[i])
                .filter(|&x| x != 0.0)
                .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    Ok(TaskVector::from_flat(first, &merged))
}

/// State of a continual baseline merge. Holds the pretrained model and the
/// current merge only.
#[derive(Debug, Clone)]
pub struct BaselineState {
    method: BaselineMethod,
    theta0: Checkpoint,
    merged: Checkpoint,
    step: usize,
    ties: TiesConfig,
}

impl BaselineState {
    /// `θ_merged = θ¹`.
    pub fn swa(theta0: Checkpoint, theta1: &Checkpoint) -> Result<Self> {
        theta0.check_schema(theta1)?;
        Ok(Self {
            method: BaselineMethod::Swa,
            merged: theta1.clone(),
            theta0,
            step: 1,
            ties: TiesConfig::default(),
        })
    }

    /// `θ_merged = θ⁰ + λ(θ¹ − θ⁰)`: the first expert is added like every
    /// later one, which keeps the result independent of expert order.
    pub fn cta(theta0: Checkpoint, theta1: &Checkpoint, lambda: f64) -> Result<Self> {
        validate_lambda(lambda)?;
        theta0.check_schema(theta1)?;
        let merged = scaled_delta(&theta0, theta1, lambda);
        Ok(Self {
            method: BaselineMethod::Cta,
            theta0,
            merged,
            step: 1,
            ties: TiesConfig {
                lambda_scale: lambda,
                ..TiesConfig::default()
            },
        })
    }

    /// `θ_merged = θ⁰ + λ(θ¹ − θ⁰)`, untrimmed.
    pub fn cties(theta0: Checkpoint, theta1: &Checkpoint, cfg: TiesConfig) -> Result<Self> {
        cfg.validate()?;
        theta0.check_schema(theta1)?;
        let merged = scaled_delta(&theta0, theta1, cfg.lambda_scale);
        Ok(Self {
            method: BaselineMethod::CTies,
            theta0,
            merged,
            step: 1,
            ties: cfg,
        })
    }

    pub fn method(&self) -> BaselineMethod {
        self.method
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn merged(&self) -> &Checkpoint {
        &self.merged
    }

    pub fn current_model(&self) -> Checkpoint {
        self.merged.clone()
    }

    pub fn into_model(self) -> Checkpoint {
        self.merged
    }

    fn expect_method(&self, method: BaselineMethod) -> Result<()> {
        if self.method != method {
            return Err(Error::InvalidConfig(format!(
                "{method:?} step on a {:?} merge",
                self.method
            )));
        }
        Ok(())
    }

    /// Dispatches to the step of this state's method.
    pub fn merge_step(&mut self, theta_t: &Checkpoint) -> Result<()> {
        match self.method {
            BaselineMethod::Swa => self.swa_step(theta_t),
            BaselineMethod::Cta => self.cta_step(theta_t),
            BaselineMethod::CTies => self.cties_step(theta_t),
        }
    }

    /// `θ_merged ← (θ_merged·(t−1) + θ_t) / t`.
    pub fn swa_step(&mut self, theta_t: &Checkpoint) -> Result<()> {
        self.expect_method(BaselineMethod::Swa)?;
        self.theta0.check_schema(theta_t)?;
        let t = self.step + 1;
        for (name, p) in self.merged.params_mut().iter_mut() {
            let incoming = theta_t.params()[name].tensor.data();
            for (m, x) in p.tensor.data_mut().iter_mut().zip(incoming) {
                // Incremental form; exact when every expert is identical.
                *m += (x - *m) / t as f64;
            }
        }
        self.step = t;
        Ok(())
    }

    /// `θ_merged ← θ_merged + λ(θ_t − θ⁰)`.
    pub fn cta_step(&mut self, theta_t: &Checkpoint) -> Result<()> {
        self.expect_method(BaselineMethod::Cta)?;
        self.theta0.check_schema(theta_t)?;
        let lambda = self.ties.lambda_scale;
        for (name, p) in self.merged.params_mut().iter_mut() {
            let incoming = theta_t.params()[name].tensor.data();
            let base = self.theta0.params()[name].tensor.data();
            for ((m, x), b) in p.tensor.data_mut().iter_mut().zip(incoming).zip(base) {
                *m += lambda * (x - b);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Re-runs Ties selection on `{θ_merged − θ⁰, θ_t − θ⁰}` and sets
    /// `θ_merged ← θ⁰ + λ(τ_merged + τ_t)` from the selected vectors.
    pub fn cties_step(&mut self, theta_t: &Checkpoint) -> Result<()> {
        self.expect_method(BaselineMethod::CTies)?;
        self.theta0.check_schema(theta_t)?;
        let tau_merged = crate::tensor::task_vector(&self.merged, &self.theta0)?;
        let tau_t = crate::tensor::task_vector(theta_t, &self.theta0)?;
        let selected = ties_select(&[&tau_merged, &tau_t], self.ties.trim_fraction)?;
        drop((tau_merged, tau_t));
        let lambda = self.ties.lambda_scale;
        let mut offset = 0;
        for (name, p) in self.merged.params_mut().iter_mut() {
            let base = self.theta0.params()[name].tensor.data();
            let n = base.len();
            let (a, b) = (
                &selected[0][offset..offset + n],
                &selected[1][offset..offset + n],
            );
            for (i, m) in p.tensor.data_mut().iter_mut().enumerate() {
                *m = base[i] + lambda * (a[i] + b[i]);
            }
            offset += n;
        }
        self.step += 1;
        Ok(())
    }
}

fn scaled_delta(theta0: &Checkpoint, theta1: &Checkpoint, lambda: f64) -> Checkpoint {
    theta0.map_values(|name, base| {
        let x = theta1.params()[name].tensor.data();
        base.iter()
            .zip(x)
            .map(|(b, v)| b + lambda * (v - b))
            .collect()
    })
}

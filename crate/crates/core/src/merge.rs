//! Sequential merging by orthogonal projection with adaptive scaling.
//!
//! [`MergeState`] holds exactly two full parameter sets (the pretrained model
//! and the current merge) no matter how many experts have been folded in.
//! Each call to [`MergeState::merge_step`] borrows one incoming expert and
//! works through it one tensor at a time.
//!
//! [`closed_form_merge`] computes the same result by a second route: it
//! accumulates the raw sum of projected task vectors and divides once at the
//! end. Tests use it as an oracle for the iterative update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob_inner, project_alpha, Matrix, ProjectionSpec};
use crate::tensor::{Checkpoint, ParamKind, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `λ_t = ‖λ_{t-1}·Δθ_merged + Δθ_proj‖ / mean_i ‖Δθ_i‖`
    Adaptive,
    /// `λ_t = √t`
    SqrtT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub alpha: f64,
    pub scaling: ScalingMode,
    pub inclusive_lower_bound: bool,
    pub eps: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            scaling: ScalingMode::Adaptive,
            inclusive_lower_bound: true,
            eps: 1e-12,
        }
    }
}

impl MergeConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn with_scaling(mut self, scaling: ScalingMode) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.projection_spec().validate()?;
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn projection_spec(&self) -> ProjectionSpec {
        ProjectionSpec {
            alpha: self.alpha,
            zero_threshold: self.eps,
            inclusive_lower_bound: self.inclusive_lower_bound,
        }
    }
}

/// Diagnostics for one merge step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub avg_norm: f64,
    pub incoming_norm: f64,
    /// Max over weight matrices of `|⟨P(ΔW), ΔW_merged⟩_F|`.
    pub orthogonality_residual: f64,
    /// Same residual divided by `max(1, ‖ΔW‖_F · ‖ΔW_merged‖_F)`, per matrix, then maxed.
    pub orthogonality_ratio: f64,
    /// `‖θ_merged − θ⁰‖₂` after the step.
    pub merged_distance: f64,
    /// The step fell back to `λ = 1`, `θ_merged = θ⁰` (all-zero task vectors).
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct MergeState {
    theta0: Checkpoint,
    merged: Checkpoint,
    lambda: f64,
    avg_norm: f64,
    step: usize,
    config: MergeConfig,
    log: Vec<StepRecord>,
}

impl MergeState {
    /// Starts a merge with the first expert as the merged model.
    pub fn init(theta0: Checkpoint, theta1: Checkpoint, config: MergeConfig) -> Result<Self> {
        config.validate()?;
        theta0.check_schema(&theta1)?;
        let avg_norm = crate::tensor::distance(&theta1, &theta0)?;
        let first = StepRecord {
            step: 1,
            lambda: 1.0,
            avg_norm,
            incoming_norm: avg_norm,
            orthogonality_residual: 0.0,
            orthogonality_ratio: 0.0,
            merged_distance: avg_norm,
            degenerate: false,
        };
        Ok(Self {
            theta0,
            merged: theta1,
            lambda: 1.0,
            avg_norm,
            step: 1,
            config,
            log: vec![first],
        })
    }

    /// Folds `theta_t` into the merge.
    pub fn merge_step(&mut self, theta_t: &Checkpoint) -> Result<&StepRecord> {
        self.theta0.check_schema(theta_t)?;
        let t = self.step + 1;
        let spec = self.config.projection_spec();
        let lambda_prev = self.lambda;

        // Pass 1: overwrite each merged tensor with the unnormalized update
        // λ_{t-1}·ΔW_merged + P(ΔW_t).
        let mut incoming_sq = 0.0;
        let mut numer_sq = 0.0;
        let mut residual: f64 = 0.0;
        let mut ratio: f64 = 0.0;
        let merged = self.merged.params_mut();
        for (name, p0) in self.theta0.iter() {
            let base = p0.tensor.data();
            let incoming = theta_t.params()[name].tensor.data();
            let slot = merged
                .get_mut(name)
                .expect("schema checked")
                .tensor
                .data_mut();

            let delta: Vec<f64> = incoming.iter().zip(base).map(|(a, b)| a - b).collect();
            incoming_sq += delta.iter().map(|v| v * v).sum::<f64>();

            let update = match p0.kind {
                ParamKind::LinearWeight => {
                    let (rows, cols) = (p0.tensor.shape()[0], p0.tensor.shape()[1]);
                    let merged_delta: Vec<f64> =
                        slot.iter().zip(base).map(|(a, b)| a - b).collect();
                    let dwm = Matrix::new(rows, cols, merged_delta)?;
                    let dw = Matrix::new(rows, cols, delta)?;
                    let proj = project_alpha(&dw, &dwm, &spec)?;
                    let inner = frob_inner(&proj, &dwm)?.abs();
                    residual = residual.max(inner);
                    ratio =
                        ratio.max(inner / (dw.frobenius_norm() * dwm.frobenius_norm()).max(1.0));
                    proj.into_data()
                }
                ParamKind::Other => delta,
            };

            for ((s, b), u) in slot.iter_mut().zip(base).zip(&update) {
                let v = lambda_prev * (*s - b) + u;
                numer_sq += v * v;
                *s = v;
            }
        }

        let incoming_norm = incoming_sq.sqrt();
        let avg_norm = ((t - 1) as f64 * self.avg_norm + incoming_norm) / t as f64;
        let numer_norm = numer_sq.sqrt();
        if !numer_norm.is_finite() {
            return Err(Error::NonFinite);
        }
        let eps = self.config.eps;
        let degenerate =
            avg_norm <= eps || (self.config.scaling == ScalingMode::Adaptive && numer_norm <= eps);
        let lambda = if degenerate {
            1.0
        } else {
            match self.config.scaling {
                ScalingMode::Adaptive => numer_norm / avg_norm,
                ScalingMode::SqrtT => (t as f64).sqrt(),
            }
        };

        // Pass 2: θ_merged = θ⁰ + update / λ_t.
        let mut dist_sq = 0.0;
        let merged = self.merged.params_mut();
        for (name, p0) in self.theta0.iter() {
            let base = p0.tensor.data();
            let slot = merged
                .get_mut(name)
                .expect("schema checked")
                .tensor
                .data_mut();
            for (s, b) in slot.iter_mut().zip(base) {
                *s = if degenerate { *b } else { b + *s / lambda };
                dist_sq += (*s - b) * (*s - b);
            }
        }

        self.step = t;
        self.lambda = lambda;
        self.avg_norm = avg_norm;
        self.log.push(StepRecord {
            step: t,
            lambda,
            avg_norm,
            incoming_norm,
            orthogonality_residual: residual,
            orthogonality_ratio: ratio,
            merged_distance: dist_sq.sqrt(),
            degenerate,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// A copy of the current merged model.
    pub fn current_model(&self) -> Checkpoint {
        self.merged.clone()
    }

    pub fn merged(&self) -> &Checkpoint {
        &self.merged
    }

    pub fn into_model(self) -> Checkpoint {
        self.merged
    }

    pub fn theta0(&self) -> &Checkpoint {
        &self.theta0
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn avg_norm(&self) -> f64 {
        self.avg_norm
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &MergeConfig {
        &self.config
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }
}

/// Runs the iterative merge over `experts` in order.
pub fn merge_sequence(
    theta0: &Checkpoint,
    experts: &[Checkpoint],
    config: MergeConfig,
) -> Result<MergeState> {
    let (first, rest) = experts.split_first().ok_or(Error::EmptySequence)?;
    let mut state = MergeState::init(theta0.clone(), first.clone(), config)?;
    for e in rest {
        state.merge_step(e)?;
    }
    Ok(state)
}

/// Streaming form of the general-term formula
/// `θ⁰ + (1/λ_T) · Σ_i P^{(i-1)}(Δθ_i)`.
///
/// Keeps the unscaled sum `S_t = Σ_{i≤t} P^{(i-1)}(Δθ_i)`; since the projector
/// only depends on the span of its reference, each new task vector is
/// projected against `S_{t-1}` directly.
#[derive(Debug)]
pub struct ClosedFormMerge<'a> {
    theta0: &'a Checkpoint,
    config: MergeConfig,
    sum: BTreeMap<String, Vec<f64>>,
    avg_norm: f64,
    lambda: f64,
    step: usize,
}

impl<'a> ClosedFormMerge<'a> {
    pub fn new(theta0: &'a Checkpoint, config: MergeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            theta0,
            config,
            sum: BTreeMap::new(),
            avg_norm: 0.0,
            lambda: 1.0,
            step: 0,
        })
    }

    pub fn push(&mut self, expert: &Checkpoint) -> Result<()> {
        self.theta0.check_schema(expert)?;
        let t = self.step + 1;
        // The reference is S_{t-1} = λ_{t-1}·ΔW_merged, so the zero test is
        // scaled to match the iterative route.
        let spec = ProjectionSpec {
            zero_threshold: self.config.eps * self.lambda,
            ..self.config.projection_spec()
        };

        let mut incoming_sq = 0.0;
        for (name, p0) in self.theta0.iter() {
            let base = p0.tensor.data();
            let delta: Vec<f64> = expert.params()[name]
                .tensor
                .data()
                .iter()
                .zip(base)
                .map(|(a, b)| a - b)
                .collect();
            incoming_sq += delta.iter().map(|v| v * v).sum::<f64>();
            if t == 1 {
                self.sum.insert(name.clone(), delta);
                continue;
            }
            let acc = self.sum.get_mut(name).expect("seeded at t = 1");
            let projected = match p0.kind {
                ParamKind::LinearWeight => {
                    let (rows, cols) = (p0.tensor.shape()[0], p0.tensor.shape()[1]);
                    let reference = Matrix::new(rows, cols, acc.clone())?;
                    let dw = Matrix::new(rows, cols, delta)?;
                    project_alpha(&dw, &reference, &spec)?.into_data()
                }
                ParamKind::Other => delta,
            };
            for (a, p) in acc.iter_mut().zip(&projected) {
                *a += p;
            }
        }

        let incoming_norm = incoming_sq.sqrt();
        self.avg_norm = ((t - 1) as f64 * self.avg_norm + incoming_norm) / t as f64;
        if t > 1 {
            let sum_norm = self
                .sum
                .values()
                .flat_map(|v| v.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let eps = self.config.eps;
            let degenerate = self.avg_norm <= eps
                || (self.config.scaling == ScalingMode::Adaptive && sum_norm <= eps);
            if degenerate {
                self.lambda = 1.0;
                self.sum
                    .values_mut()
                    .for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
            } else {
                self.lambda = match self.config.scaling {
                    ScalingMode::Adaptive => sum_norm / self.avg_norm,
                    ScalingMode::SqrtT => (t as f64).sqrt(),
                };
            }
        }
        self.step = t;
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn finish(self) -> Result<Checkpoint> {
        if self.step == 0 {
            return Err(Error::EmptySequence);
        }
        let lambda = self.lambda;
        let sum = self.sum;
        Ok(self.theta0.map_values(|name, base| {
            base.iter()
                .zip(&sum[name])
                .map(|(b, s)| b + s / lambda)
                .collect()
        }))
    }
}

/// `θ⁰ + (1/λ_T) · Σ_i P^{(i-1)}(Δθ_i)` with `P^{(0)}` the identity.
pub fn closed_form_merge(
    theta0: &Checkpoint,
    experts: &[Checkpoint],
    config: MergeConfig,
) -> Result<Checkpoint> {
    if experts.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut acc = ClosedFormMerge::new(theta0, config)?;
    for e in experts {
        acc.push(e)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn lw(data: [f64; 4]) -> Checkpoint {
        Checkpoint::new()
            .with(
                "w",
                Tensor::new(vec![2, 2], data.to_vec()).unwrap(),
                ParamKind::LinearWeight,
            )
            .unwrap()
    }

    fn other(data: Vec<f64>) -> Checkpoint {
        let n = data.len();
        Checkpoint::new()
            .with("p", Tensor::new(vec![n], data).unwrap(), ParamKind::Other)
            .unwrap()
    }

    #[test]
    fn init_sets_lambda_one() {
        let z = lw([0.0; 4]);
        let s = MergeState::init(z.clone(), z.clone(), MergeConfig::default()).unwrap();
        assert_eq!(s.lambda(), 1.0);
        assert_eq!(s.step(), 1);
        assert_eq!(s.avg_norm(), 0.0);
        assert_eq!(s.current_model(), z);
    }

    #[test]
    fn init_schema_mismatch() {
        let r = MergeState::init(lw([0.0; 4]), other(vec![0.0; 4]), MergeConfig::default());
        assert!(matches!(r, Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn init_rejects_bad_alpha() {
        let z = lw([0.0; 4]);
        let r = MergeState::init(z.clone(), z, MergeConfig::with_alpha(1.5));
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn all_zero_is_degenerate() {
        let z = lw([0.0; 4]);
        let mut s = MergeState::init(z.clone(), z.clone(), MergeConfig::default()).unwrap();
        let rec = s.merge_step(&z).unwrap().clone();
        assert!(rec.degenerate);
        assert_eq!(s.lambda(), 1.0);
        assert_eq!(s.current_model(), z);
    }

    #[test]
    fn current_model_is_pure() {
        let z = lw([0.0; 4]);
        let a = lw([0.0, 1.0, 1.0, 0.0]);
        let s = MergeState::init(z, a.clone(), MergeConfig::default()).unwrap();
        assert_eq!(s.current_model(), a);
        assert_eq!(s.current_model(), s.current_model());
    }

    #[test]
    fn closed_form_single_expert_is_exact() {
        let z = lw([0.5, 0.0, 0.0, 0.5]);
        let a = lw([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            closed_form_merge(&z, &[a.clone()], MergeConfig::default()).unwrap(),
            a
        );
        assert!(matches!(
            closed_form_merge(&z, &[], MergeConfig::default()),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn sqrt_t_lambda_trajectory() {
        let z = other(vec![0.0; 3]);
        let experts = [
            other(vec![1.0, 0.0, 0.0]),
            other(vec![0.0, 2.0, 0.0]),
            other(vec![0.0, 0.0, 3.0]),
        ];
        let cfg = MergeConfig::default().with_scaling(ScalingMode::SqrtT);
        let s = merge_sequence(&z, &experts, cfg).unwrap();
        let lambdas: Vec<f64> = s.log().iter().map(|r| r.lambda).collect();
        assert_eq!(lambdas, vec![1.0, 2f64.sqrt(), 3f64.sqrt()]);
    }
}

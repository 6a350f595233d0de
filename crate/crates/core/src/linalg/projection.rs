use super::{full_svd, Matrix};
use crate::error::{Error, Result};

/// Parameters of the projector `P_α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSpec {
    /// Fraction of singular-value mass that fixes the cut-off rank `r_α`.
    pub alpha: f64,
    /// Below this scale a matrix counts as zero.
    pub zero_threshold: f64,
    /// Keep index `r_α` itself (`i, j >= r_α`) rather than starting at `r_α + 1`.
    pub inclusive_lower_bound: bool,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            zero_threshold: 1e-12,
            inclusive_lower_bound: true,
        }
    }
}

impl ProjectionSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        let spec = Self {
            alpha,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.zero_threshold >= 0.0 && self.zero_threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "zero threshold must be finite and nonnegative, got {}",
                self.zero_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankAlpha {
    /// 1-based cut-off rank.
    pub rank: usize,
    /// Every singular value was at or below the zero threshold.
    pub degenerate: bool,
}

/// Smallest `r >= 1` whose leading singular values carry at least `alpha`
/// of the total mass.
pub fn rank_alpha(s: &[f64], spec: &ProjectionSpec) -> RankAlpha {
    if s.iter().all(|&x| x <= spec.zero_threshold) {
        return RankAlpha {
            rank: 1,
            degenerate: true,
        };
    }
    let total: f64 = s.iter().sum();
    let target = spec.alpha * total;
    let mut acc = 0.0;
    for (i, &x) in s.iter().enumerate() {
        acc += x;
        if acc >= target {
            return RankAlpha {
                rank: i + 1,
                degenerate: false,
            };
        }
    }
    RankAlpha {
        rank: s.len(),
        degenerate: false,
    }
}

/// Projects `dw` onto the span of `{u_i v_jᵀ : i, j >= r_α, i != j}`, where
/// `u_i`, `v_j` are singular vectors of `dw_merged`. The result is
/// Frobenius-orthogonal to `dw_merged`.
///
/// If `dw_merged` is numerically zero there is nothing to avoid and `dw` is
/// returned unchanged.
pub fn project_alpha(dw: &Matrix, dw_merged: &Matrix, spec: &ProjectionSpec) -> Result<Matrix> {
    if dw.shape() != dw_merged.shape() {
        return Err(Error::ShapeMismatch {
            left: vec![dw.rows(), dw.cols()],
            right: vec![dw_merged.rows(), dw_merged.cols()],
        });
    }
    if !dw.is_finite() || !dw_merged.is_finite() {
        return Err(Error::NonFinite);
    }
    let (m, n) = dw.shape();
    if dw_merged.frobenius_norm() <= spec.zero_threshold * m.max(n) as f64 {
        return Ok(dw.clone());
    }

    let svd = full_svd(dw_merged)?;
    let r = rank_alpha(&svd.s, spec).rank;
    // 0-based index of the first kept row/column.
    let first = if spec.inclusive_lower_bound { r - 1 } else { r };

    // Coefficients in the singular basis: M = Uᵀ · dW · V.
    let mut coeff = svd.u.transpose().matmul(dw)?.matmul(&svd.v)?;
    for i in 0..m {
        for j in 0..n {
            if i < first || j < first || i == j {
                coeff.set(i, j, 0.0);
            }
        }
    }
    svd.u.matmul(&coeff)?.matmul(&svd.v.transpose())
}

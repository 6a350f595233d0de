//! Seeded Gaussian-cluster classification tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::TaskHead;
use super::stream_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub noise_sigma: f64,
    /// Class means and noise occupy this many coordinates before the
    /// rotation, so each task lives in its own subspace of the input space.
    pub signal_dims: usize,
    /// Head entries are drawn from `N(0, (gain / √hidden)²)`.
    pub head_gain: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            classes: 4,
            hidden: 128,
            noise_sigma: 0.1,
            signal_dims: 4,
            head_gain: 0.08,
        }
    }
}

/// Inputs are `x = R (μ_y + σ ε)` with labels cycling through the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    input_dim: usize,
    classes: usize,
    /// `C×d`, unit-norm rows.
    pub class_means: Vec<f64>,
    pub noise_sigma: f64,
    pub signal_dims: usize,
    /// `d×d` orthogonal, row-major.
    pub rotation: Vec<f64>,
}

/// `n` inputs (row-major `n×d`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

const TASK_STREAM: u64 = 0x7461_736b;
const HEAD_STREAM: u64 = 0x6865_6164;
const TEST_STREAM: u64 = 0x7465_7374;
const TRAIN_STREAM: u64 = 0x0074_726e;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormalizes the columns of a square row-major matrix in place (two
/// passes of modified Gram-Schmidt).
fn orthonormalize_columns(a: &mut [f64], d: usize) {
    for j in 0..d {
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..d).map(|i| a[i * d + j] * a[i * d + k]).sum();
                for i in 0..d {
                    a[i * d + j] -= dot * a[i * d + k];
                }
            }
        }
        let len = (0..d)
            .map(|i| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        for i in 0..d {
            a[i * d + j] /= len;
        }
    }
}

/// Draws a task and its frozen head from `seed`.
pub fn gen_task(seed: u64, cfg: &TaskConfig) -> Result<(SyntheticTask, TaskHead)> {
    let (d, c) = (cfg.input_dim, cfg.classes);
    if d < 2 || c < 2 || cfg.hidden < 2 {
        return Err(Error::BadDims(format!(
            "need input_dim >= 2, classes >= 2 and hidden >= 2, got {d}, {c}, {}",
            cfg.hidden
        )));
    }
    if cfg.signal_dims == 0 || cfg.signal_dims > d {
        return Err(Error::BadDims(format!(
            "signal_dims must lie in 1..={d}, got {}",
            cfg.signal_dims
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise_sigma {} is invalid",
            cfg.noise_sigma
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, TASK_STREAM]));
    let k = cfg.signal_dims;
    let mut class_means = vec![0.0; c * d];
    for row in class_means.chunks_mut(d) {
        row[..k].copy_from_slice(&normal_vec(&mut rng, k));
        let len = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= len);
    }
    let mut rotation = normal_vec(&mut rng, d * d);
    orthonormalize_columns(&mut rotation, d);

    let mut head_rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, HEAD_STREAM]));
    let head = TaskHead::random(&mut head_rng, c, cfg.hidden, cfg.head_gain);

    let task = SyntheticTask {
        seed,
        input_dim: d,
        classes: c,
        class_means,
        noise_sigma: cfg.noise_sigma,
        signal_dims: k,
        rotation,
    };
    Ok((task, head))
}

impl SyntheticTask {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Batch {
        let d = self.input_dim;
        let mut inputs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut v = vec![0.0; d];
        for i in 0..n {
            let y = i % self.classes;
            let mean = &self.class_means[y * d..(y + 1) * d];
            for (vk, mk) in v.iter_mut().zip(mean).take(self.signal_dims) {
                let e: f64 = StandardNormal.sample(rng);
                *vk = mk + self.noise_sigma * e;
            }
            for row in self.rotation.chunks(d) {
                inputs.push(row.iter().zip(&v).map(|(a, b)| a * b).sum());
            }
            labels.push(y);
        }
        Batch { inputs, labels }
    }

    /// Training samples from the stream identified by `key`.
    pub fn sample(&self, n: usize, key: &[u64]) -> Batch {
        let mut parts = vec![self.seed, TRAIN_STREAM];
        parts.extend_from_slice(key);
        self.draw(n, &mut ChaCha8Rng::seed_from_u64(stream_seed(&parts)))
    }

    /// The fixed held-out set of size `n`.
    pub fn test_set(&self, n: usize) -> Batch {
        self.draw(
            n,
            &mut ChaCha8Rng::seed_from_u64(stream_seed(&[self.seed, TEST_STREAM])),
        )
    }
}

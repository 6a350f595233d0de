//! The two-layer tanh trunk, its frozen task heads, and plain full-batch
//! gradient descent through softmax cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::stream_seed;
use super::task::{Batch, SyntheticTask};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ParamKind, ParamSet, Tensor};

/// Frozen per-task classifier `C×h`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub classes: usize,
    pub hidden: usize,
    pub weights: Vec<f64>,
}

impl TaskHead {
    pub(crate) fn random(rng: &mut ChaCha8Rng, classes: usize, hidden: usize, gain: f64) -> Self {
        let scale = gain / (hidden as f64).sqrt();
        let weights = (0..classes * hidden)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Self {
            classes,
            hidden,
            weights,
        }
    }
}

/// Trunk `z = tanh(W2 · tanh(W1 x + b1) + b2)`, stored as a checkpoint so it
/// can be merged directly.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMLP {
    trunk: Checkpoint,
    input_dim: usize,
    hidden: usize,
}

/// Dense copies of the trunk parameters for the inner loops.
struct Weights {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct Activations {
    z1: Vec<f64>,
    z2: Vec<f64>,
}

impl TinyMLP {
    /// `W1 ~ N(0, 1/d)`, `W2 ~ N(0, 1/h)`, zero biases.
    pub fn init(seed: u64, input_dim: usize, hidden: usize) -> Result<Self> {
        if input_dim < 2 || hidden < 2 {
            return Err(Error::BadDims(format!(
                "need input_dim >= 2 and hidden >= 2, got {input_dim} and {hidden}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x1417]));
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let w1 = normal(hidden * input_dim, 1.0 / (input_dim as f64).sqrt());
        let w2 = normal(hidden * hidden, 1.0 / (hidden as f64).sqrt());
        Self::from_parts(
            input_dim,
            hidden,
            w1,
            vec![0.0; hidden],
            w2,
            vec![0.0; hidden],
        )
    }

    fn from_parts(
        d: usize,
        h: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let trunk = Checkpoint::new()
            .with("b1", Tensor::new(vec![h], b1)?, ParamKind::Other)?
            .with("b2", Tensor::new(vec![h], b2)?, ParamKind::Other)?
            .with("w1", Tensor::new(vec![h, d], w1)?, ParamKind::LinearWeight)?
            .with("w2", Tensor::new(vec![h, h], w2)?, ParamKind::LinearWeight)?;
        Ok(Self {
            trunk,
            input_dim: d,
            hidden: h,
        })
    }

    /// Wraps a trunk checkpoint (e.g. a merged model).
    pub fn from_checkpoint(trunk: Checkpoint) -> Result<Self> {
        let shape = |name: &str| {
            trunk
                .get(name)
                .map(|p| p.tensor.shape().to_vec())
                .ok_or_else(|| Error::SchemaMismatch(format!("trunk is missing `{name}`")))
        };
        let w1 = shape("w1")?;
        let (h, d) = match w1.as_slice() {
            [h, d] => (*h, *d),
            _ => return Err(Error::BadDims("w1 must be 2-D".into())),
        };
        if shape("w2")? != [h, h] || shape("b1")? != [h] || shape("b2")? != [h] || trunk.len() != 4
        {
            return Err(Error::SchemaMismatch(
                "trunk shapes are inconsistent".into(),
            ));
        }
        Ok(Self {
            trunk,
            input_dim: d,
            hidden: h,
        })
    }

    pub fn trunk(&self) -> &Checkpoint {
        &self.trunk
    }

    pub fn into_trunk(self) -> Checkpoint {
        self.trunk
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn weights(&self) -> Weights {
        let get = |n: &str| self.trunk.get(n).expect("validated").tensor.data().to_vec();
        Weights {
            w1: get("w1"),
            b1: get("b1"),
            w2: get("w2"),
            b2: get("b2"),
        }
    }

    fn with_weights(&self, w: Weights) -> Self {
        Self::from_parts(self.input_dim, self.hidden, w.w1, w.b1, w.w2, w.b2)
            .expect("shapes unchanged")
    }

    /// Trunk features for one input.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        forward(&self.weights(), self.input_dim, self.hidden, x).z2
    }
}

fn forward(w: &Weights, d: usize, h: usize, x: &[f64]) -> Activations {
    let z1: Vec<f64> = (0..h)
        .map(|i| {
            let row = &w.w1[i * d..(i + 1) * d];
            (w.b1[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
        })
        .collect();
    let z2: Vec<f64> = (0..h)
        .map(|i| {
            let row = &w.w2[i * h..(i + 1) * h];
            (w.b2[i] + row.iter().zip(&z1).map(|(a, b)| a * b).sum::<f64>()).tanh()
        })
        .collect();
    Activations { z1, z2 }
}

fn logits(head: &TaskHead, z: &[f64]) -> Vec<f64> {
    head.weights
        .chunks(head.hidden)
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adds the gradient of `scale · CE(head · trunk(x), y)` to `grad`.
fn accumulate_gradient(
    w: &Weights,
    grad: &mut Weights,
    d: usize,
    h: usize,
    head: &TaskHead,
    batch: &Batch,
    scale: f64,
) {
    for (x, &y) in batch.inputs.chunks(d).zip(&batch.labels) {
        let act = forward(w, d, h, x);
        let mut g_logits = logits(head, &act.z2);
        let max = g_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in g_logits.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for (k, v) in g_logits.iter_mut().enumerate() {
            *v = scale * (*v / total - if k == y { 1.0 } else { 0.0 });
        }

        let mut g_a2 = vec![0.0; h];
        for (c, gl) in g_logits.iter().enumerate() {
            let row = &head.weights[c * h..(c + 1) * h];
            for (g, hw) in g_a2.iter_mut().zip(row) {
                *g += gl * hw;
            }
        }
        for (g, z) in g_a2.iter_mut().zip(&act.z2) {
            *g *= 1.0 - z * z;
        }

        let mut g_a1 = vec![0.0; h];
        for i in 0..h {
            let gi = g_a2[i];
            grad.b2[i] += gi;
            let grow = &mut grad.w2[i * h..(i + 1) * h];
            let wrow = &w.w2[i * h..(i + 1) * h];
            for j in 0..h {
                grow[j] += gi * act.z1[j];
                g_a1[j] += gi * wrow[j];
            }
        }
        for (g, z) in g_a1.iter_mut().zip(&act.z1) {
            *g *= 1.0 - z * z;
        }
        for i in 0..h {
            let gi = g_a1[i];
            grad.b1[i] += gi;
            for (g, xv) in grad.w1[i * d..(i + 1) * d].iter_mut().zip(x) {
                *g += gi * xv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fresh samples per task per step.
    pub batch_per_task: usize,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            batch_per_task: 64,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            steps: 400,
            lr: 0.05,
            batch_per_task: 64,
        }
    }
}

/// Gradient descent on the mean cross-entropy over all given tasks. Each
/// step draws a new batch per task from the task's `stream` sequence.
fn train(
    model: &TinyMLP,
    tasks: &[(&SyntheticTask, &TaskHead)],
    cfg: &TrainConfig,
    stream: u64,
) -> TinyMLP {
    let (d, h) = (model.input_dim, model.hidden);
    let mut w = model.weights();
    let total = (tasks.len() * cfg.batch_per_task) as f64;
    for step in 0..cfg.steps {
        let mut grad = Weights {
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w2: vec![0.0; h * h],
            b2: vec![0.0; h],
        };
        for (task, head) in tasks {
            let batch = task.sample(cfg.batch_per_task, &[stream, step as u64]);
            accumulate_gradient(&w, &mut grad, d, h, head, &batch, 1.0 / total);
        }
        for (p, g) in [
            (&mut w.w1, &grad.w1),
            (&mut w.b1, &grad.b1),
            (&mut w.w2, &grad.w2),
            (&mut w.b2, &grad.b2),
        ] {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= cfg.lr * gv;
            }
        }
    }
    model.with_weights(w)
}

const PRETRAIN_STREAM: u64 = 0x7072_6574;
const FINETUNE_STREAM: u64 = 0x6669_6e65;

/// Trains a fresh trunk on the balanced mixture of `tasks`.
pub fn pretrain(
    seed: u64,
    input_dim: usize,
    hidden: usize,
    tasks: &[(SyntheticTask, TaskHead)],
    cfg: &TrainConfig,
) -> Result<TinyMLP> {
    if tasks.is_empty() {
        return Err(Error::EmptySequence);
    }
    let model = TinyMLP::init(seed, input_dim, hidden)?;
    check_compatible(&model, tasks.iter().map(|(t, h)| (t, h)))?;
    let refs: Vec<(&SyntheticTask, &TaskHead)> = tasks.iter().map(|(t, h)| (t, h)).collect();
    Ok(train(&model, &refs, cfg, PRETRAIN_STREAM))
}

/// Fine-tunes every trunk parameter on one task through its frozen head.
pub fn finetune(
    theta0: &TinyMLP,
    task: &SyntheticTask,
    head: &TaskHead,
    cfg: &TrainConfig,
) -> Result<TinyMLP> {
    check_compatible(theta0, std::iter::once((task, head)))?;
    Ok(train(theta0, &[(task, head)], cfg, FINETUNE_STREAM))
}

fn check_compatible<'a>(
    model: &TinyMLP,
    tasks: impl Iterator<Item = (&'a SyntheticTask, &'a TaskHead)>,
) -> Result<()> {
    for (t, h) in tasks {
        if t.input_dim() != model.input_dim || h.hidden != model.hidden || h.classes != t.classes()
        {
            return Err(Error::BadDims(format!(
                "task (d={}, C={}) with head {}×{} does not fit a trunk with d={}, h={}",
                t.input_dim(),
                t.classes(),
                h.classes,
                h.hidden,
                model.input_dim,
                model.hidden
            )));
        }
    }
    Ok(())
}

/// Fraction of a seeded `n_test`-sample test set classified correctly.
pub fn evaluate_accuracy(
    trunk: &TinyMLP,
    task: &SyntheticTask,
    head: &TaskHead,
    n_test: usize,
) -> Result<f64> {
    if n_test == 0 {
        return Err(Error::InvalidConfig("n_test must be at least 1".into()));
    }
    check_compatible(trunk, std::iter::once((task, head)))?;
    let w = trunk.weights();
    let batch = task.test_set(n_test);
    let correct = batch
        .inputs
        .chunks(trunk.input_dim)
        .zip(&batch.labels)
        .filter(|(x, &y)| {
            let act = forward(&w, trunk.input_dim, trunk.hidden, x);
            argmax(&logits(head, &act.z2)) == y
        })
        .count();
    Ok(correct as f64 / n_test as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (task, head) = super::super::gen_task(3, &Default::default()).unwrap();
        let model = TinyMLP::init(5, task.input_dim(), head.hidden).unwrap();
        let batch = task.sample(6, &[1]);
        let (d, h) = (model.input_dim, model.hidden);
        let w = model.weights();
        let mut grad = Weights {
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w2: vec![0.0; h * h],
            b2: vec![0.0; h],
        };
        accumulate_gradient(&w, &mut grad, d, h, &head, &batch, 1.0 / 6.0);

        let loss = |w: &Weights| -> f64 {
            batch
                .inputs
                .chunks(d)
                .zip(&batch.labels)
                .map(|(x, &y)| {
                    let l = logits(&head, &forward(w, d, h, x).z2);
                    let lse = l.iter().map(|v| v.exp()).sum::<f64>().ln();
                    lse - l[y]
                })
                .sum::<f64>()
                / 6.0
        };
        let eps = 1e-6;
        for (idx, analytic) in [(0usize, grad.w1[0]), (7, grad.w1[7])] {
            let mut wp = model.weights();
            wp.w1[idx] += eps;
            let mut wm = model.weights();
            wm.w1[idx] -= eps;
            let numeric = (loss(&wp) - loss(&wm)) / (2.0 * eps);
            assert!((numeric - analytic).abs() < 1e-7, "{numeric} vs {analytic}");
        }
        for idx in [0usize, 5] {
            let mut wp = model.weights();
            wp.b2[idx] += eps;
            let mut wm = model.weights();
            wm.b2[idx] -= eps;
            let numeric = (loss(&wp) - loss(&wm)) / (2.0 * eps);
            assert!((numeric - grad.b2[idx]).abs() < 1e-7);
        }
        let mut wp = model.weights();
        wp.w2[3] += eps;
        let mut wm = model.weights();
        wm.w2[3] -= eps;
        let numeric = (loss(&wp) - loss(&wm)) / (2.0 * eps);
        assert!((numeric - grad.w2[3]).abs() < 1e-7);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

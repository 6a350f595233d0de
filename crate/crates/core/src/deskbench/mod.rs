//! Desk-scale benchmark: seeded synthetic tasks, a tiny tanh trunk with
//! frozen per-task heads, and a runner that merges fine-tuned experts over
//! shuffled task orders.
//!
//! Everything is driven by [`stream_seed`], so a given [`BenchConfig`]
//! always yields the same report bytes, whatever the thread count.

mod mlp;
mod task;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mlp::{evaluate_accuracy, finetune, pretrain, TaskHead, TinyMLP, TrainConfig};
pub use task::{gen_task, Batch, SyntheticTask, TaskConfig};

use crate::baselines::{default_lambda, TiesConfig};
use crate::error::{Error, Result};
use crate::eval::{avg_accuracy, backward_transfer, AccuracyMatrix};
use crate::merge::MergeConfig;
use crate::sequential::MergerSpec;
use crate::tensor::Checkpoint;

/// Derives a 64-bit seed from a list of integers (SplitMix64 finalizer
/// folded over the parts).
pub fn stream_seed(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x6f70_636d, |h, &p| mix(h ^ mix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Opcm,
    Swa,
    Ta,
    Ties,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Opcm, Method::Swa, Method::Ta, Method::Ties];

    pub fn name(self) -> &'static str {
        match self {
            Method::Opcm => "opcm",
            Method::Swa => "swa",
            Method::Ta => "ta",
            Method::Ties => "ties",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opcm" => Ok(Method::Opcm),
            "swa" => Ok(Method::Swa),
            "ta" => Ok(Method::Ta),
            "ties" => Ok(Method::Ties),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub tasks: usize,
    pub seeds: usize,
    pub orders: usize,
    pub methods: Vec<Method>,
    pub base_seed: u64,
    pub merge: MergeConfig,
    /// Task-arithmetic scale for `ta` and `ties`; `None` picks the default
    /// for the task count.
    pub lambda: Option<f64>,
    pub trim_fraction: f64,
    pub task: TaskConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub n_test: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tasks: 8,
            seeds: 5,
            orders: 10,
            methods: Method::ALL.to_vec(),
            base_seed: 0,
            merge: MergeConfig::default(),
            lambda: None,
            trim_fraction: 0.2,
            task: TaskConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            n_test: 512,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 {
            return Err(Error::TooFewTasks);
        }
        if self.seeds == 0 || self.orders == 0 || self.n_test == 0 || self.methods.is_empty() {
            return Err(Error::InvalidConfig(
                "seeds, orders, n_test and methods must all be nonzero".into(),
            ));
        }
        self.merge.validate()?;
        for m in &self.methods {
            self.merger(*m).validate()?;
        }
        Ok(())
    }

    pub fn merger(&self, method: Method) -> MergerSpec {
        let lambda = self.lambda.unwrap_or_else(|| default_lambda(self.tasks));
        match method {
            Method::Opcm => MergerSpec::Opcm(self.merge),
            Method::Swa => MergerSpec::Swa,
            Method::Ta => MergerSpec::Ta { lambda },
            Method::Ties => MergerSpec::Ties(TiesConfig {
                trim_fraction: self.trim_fraction,
                lambda_scale: lambda,
            }),
        }
    }
}

impl MergerSpec {
    fn validate(&self) -> Result<()> {
        match self {
            MergerSpec::Opcm(c) => c.validate(),
            MergerSpec::Swa => Ok(()),
            MergerSpec::Ta { lambda } => TiesConfig::new(1.0, *lambda).map(|_| ()),
            MergerSpec::Ties(c) => c.validate(),
        }
    }
}

/// One `(seed, method, order)` cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed_index: usize,
    pub order_index: usize,
    pub method: Method,
    /// Task indices in merge order.
    pub order: Vec<usize>,
    pub acc: f64,
    pub bwt: f64,
    /// OPCM only.
    pub lambda: Vec<f64>,
    /// OPCM only.
    pub max_orthogonality_ratio: Option<f64>,
    /// Columns follow the merge order.
    pub matrix: AccuracyMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed_index: usize,
    pub task_seeds: Vec<u64>,
    /// Pretrained trunk on each task.
    pub pretrained_acc: Vec<f64>,
    /// Each expert on its own task.
    pub expert_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub acc_mean: f64,
    /// Population standard deviation over every run.
    pub acc_std: f64,
    /// Within-seed standard deviation across orders, averaged over seeds.
    pub acc_std_orders: f64,
    pub bwt_mean: f64,
    pub bwt_std: f64,
    /// Mean λ per step (OPCM only).
    pub lambda_traj: Vec<f64>,
    pub max_orthogonality_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub per_method: BTreeMap<String, MethodSummary>,
    /// Method name to the CSV file holding its mean accuracy matrix.
    pub matrices: BTreeMap<String, String>,
    pub seeds: Vec<SeedSummary>,
    pub runs: Vec<RunRecord>,
}

impl BenchReport {
    /// Mean accuracy matrix of a method over all its runs, in percent, with
    /// columns indexed by merge position.
    pub fn mean_matrix_csv(&self, method: Method) -> Option<String> {
        let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.method == method).collect();
        let t = self.config.tasks;
        if runs.is_empty() {
            return None;
        }
        let mut out: String = (1..=t)
            .map(|j| format!("position_{j}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for i in 0..t {
            let row: Vec<String> = (0..t)
                .map(|j| {
                    let sum: f64 = runs.iter().map(|r| r.matrix.get(i, j).unwrap_or(0.0)).sum();
                    format!("{}", 100.0 * sum / runs.len() as f64)
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Some(out)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

const PRETRAIN_SEED: u64 = 0x7072;
const ORDER_SEED: u64 = 0x6f72;

struct SeedWorld {
    tasks: Vec<(SyntheticTask, TaskHead)>,
    theta0: Checkpoint,
    experts: Vec<Checkpoint>,
    summary: SeedSummary,
}

fn build_seed(cfg: &BenchConfig, seed_index: usize) -> Result<SeedWorld> {
    let s = seed_index as u64;
    let task_seeds: Vec<u64> = (0..cfg.tasks)
        .map(|i| stream_seed(&[cfg.base_seed, s, i as u64]))
        .collect();
    let tasks = task_seeds
        .iter()
        .map(|&ts| gen_task(ts, &cfg.task))
        .collect::<Result<Vec<_>>>()?;
    let pre = pretrain(
        stream_seed(&[cfg.base_seed, s, PRETRAIN_SEED]),
        cfg.task.input_dim,
        cfg.task.hidden,
        &tasks,
        &cfg.pretrain,
    )?;
    let experts = tasks
        .par_iter()
        .map(|(t, h)| finetune(&pre, t, h, &cfg.finetune))
        .collect::<Result<Vec<_>>>()?;
    let pretrained_acc = tasks
        .iter()
        .map(|(t, h)| evaluate_accuracy(&pre, t, h, cfg.n_test))
        .collect::<Result<Vec<_>>>()?;
    let expert_acc = experts
        .iter()
        .zip(&tasks)
        .map(|(e, (t, h))| evaluate_accuracy(e, t, h, cfg.n_test))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedWorld {
        tasks,
        theta0: pre.into_trunk(),
        experts: experts.into_iter().map(TinyMLP::into_trunk).collect(),
        summary: SeedSummary {
            seed_index,
            task_seeds,
            pretrained_acc,
            expert_acc,
        },
    })
}

/// Task order for `(seed, order)`.
pub fn shuffled_order(
    base_seed: u64,
    seed_index: usize,
    order_index: usize,
    tasks: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tasks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
        base_seed,
        seed_index as u64,
        ORDER_SEED,
        order_index as u64,
    ]));
    order.shuffle(&mut rng);
    order
}

fn run_cell(
    cfg: &BenchConfig,
    world: &SeedWorld,
    seed_index: usize,
    method: Method,
    order_index: usize,
) -> Result<RunRecord> {
    let order = shuffled_order(cfg.base_seed, seed_index, order_index, cfg.tasks);
    let names = order.iter().map(|k| format!("task_{}", k + 1)).collect();
    let mut matrix = AccuracyMatrix::new(names);
    let spec = cfg.merger(method);

    let evaluate_row =
        |matrix: &mut AccuracyMatrix, step: usize, trunk: &Checkpoint| -> Result<()> {
            let model = TinyMLP::from_checkpoint(trunk.clone())?;
            for (j, &k) in order.iter().enumerate() {
                let (t, h) = &world.tasks[k];
                matrix.set(step, j, evaluate_accuracy(&model, t, h, cfg.n_test)?)?;
            }
            Ok(())
        };

    let mut merger = spec.start(&world.theta0, &world.experts[order[0]])?;
    evaluate_row(&mut matrix, 0, merger.merged())?;
    for (step, &k) in order.iter().enumerate().skip(1) {
        merger.step(&world.experts[k])?;
        evaluate_row(&mut matrix, step, merger.merged())?;
    }

    let log = merger.log();
    let max_ratio = (!log.is_empty()).then(|| {
        log.iter()
            .map(|r| r.orthogonality_ratio)
            .fold(0.0, f64::max)
    });
    Ok(RunRecord {
        seed_index,
        order_index,
        method,
        acc: avg_accuracy(&matrix)?,
        bwt: backward_transfer(&matrix)?,
        lambda: log.iter().map(|r| r.lambda).collect(),
        max_orthogonality_ratio: max_ratio,
        order,
        matrix,
    })
}

fn summarize(cfg: &BenchConfig, runs: &[&RunRecord]) -> MethodSummary {
    let accs: Vec<f64> = runs.iter().map(|r| r.acc).collect();
    let bwts: Vec<f64> = runs.iter().map(|r| r.bwt).collect();
    let per_seed_std: Vec<f64> = (0..cfg.seeds)
        .map(|s| {
            let v: Vec<f64> = runs
                .iter()
                .filter(|r| r.seed_index == s)
                .map(|r| r.acc)
                .collect();
            std(&v)
        })
        .collect();
    let steps = runs.iter().map(|r| r.lambda.len()).max().unwrap_or(0);
    let lambda_traj = (0..steps)
        .map(|i| mean(&runs.iter().map(|r| r.lambda[i]).collect::<Vec<_>>()))
        .collect();
    let max_orthogonality_ratio = runs
        .iter()
        .filter_map(|r| r.max_orthogonality_ratio)
        .reduce(f64::max);
    MethodSummary {
        acc_mean: mean(&accs),
        acc_std: std(&accs),
        acc_std_orders: mean(&per_seed_std),
        bwt_mean: mean(&bwts),
        bwt_std: std(&bwts),
        lambda_traj,
        max_orthogonality_ratio,
    }
}

/// Runs the full grid: for each seed, build tasks, pretrain and fine-tune;
/// then merge every `(method, order)` pair and evaluate after each step.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let worlds = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| build_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, Method, usize)> = (0..cfg.seeds)
        .flat_map(|s| {
            methods
                .iter()
                .flat_map(move |&m| (0..cfg.orders).map(move |o| (s, m, o)))
        })
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(s, m, o)| run_cell(cfg, &worlds[s], s, m, o))
        .collect::<Result<Vec<_>>>()?;

    let mut per_method = BTreeMap::new();
    let mut matrices = BTreeMap::new();
    for &m in &methods {
        let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m).collect();
        per_method.insert(m.name().to_string(), summarize(cfg, &mine));
        matrices.insert(
            m.name().to_string(),
            format!("matrices/{}_mean.csv", m.name()),
        );
    }
    Ok(BenchReport {
        config: cfg.clone(),
        per_method,
        matrices,
        seeds: worlds.into_iter().map(|w| w.summary).collect(),
        runs,
    })
}

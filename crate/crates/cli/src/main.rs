//! `opcm` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use opcm::baselines::{default_lambda, TiesConfig};
use opcm::deskbench::{run_benchmark, BenchConfig, Method};
use opcm::eval::{commutativity_gap, cosine_similarity_matrix, MergeReport, Verification};
use opcm::merge::{ClosedFormMerge, MergeConfig, ScalingMode};
use opcm::sequential::MergerSpec;
use opcm::{
    classify_params, global_norm, load_checkpoint, max_relative_deviation, save_checkpoint,
    task_vector, Checkpoint, DType, ParamSet,
};

const VERIFY_DEVIATION: f64 = 1e-9;
const VERIFY_ORTHOGONALITY: f64 = 1e-8;

#[derive(Parser)]
#[command(
    name = "opcm",
    version,
    about = "Continual merging of fine-tuned checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge experts into the pretrained model, in command-line order.
    Merge(MergeArgs),
    /// Cosine similarity of task vectors, or order sensitivity of a merger.
    Diag(DiagArgs),
    /// Run the synthetic benchmark.
    Bench(BenchArgs),
    /// Describe a checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Opcm,
    Swa,
    Ta,
    Ties,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScalingArg {
    Adaptive,
    #[value(name = "sqrt_t")]
    SqrtT,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Args)]
struct SharedMergeFlags {
    /// Projection threshold (opcm).
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Scaling rule (opcm).
    #[arg(long, value_enum, default_value_t = ScalingArg::Adaptive)]
    scaling: ScalingArg,
    /// Task-arithmetic scale (ta, ties). Defaults to 0.3 for up to 8
    /// experts, 0.1 beyond.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fraction of entries kept by Ties trimming.
    #[arg(long)]
    trim: Option<f64>,
    /// Re-classify tensors: 2-D tensors whose names match this glob become
    /// linear weights, everything else is left unprojected.
    #[arg(long)]
    linear_pattern: Option<String>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    experts: Vec<PathBuf>,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[command(flatten)]
    flags: SharedMergeFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Recompute the result by the general-term formula and check the
    /// per-step orthogonality (opcm only).
    #[arg(long)]
    verify: bool,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    dtype: DTypeArg,
}

#[derive(Args)]
#[group(id = "mode", required = true, multiple = false, args = ["cosine", "commutativity"])]
struct DiagArgs {
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    experts: Vec<PathBuf>,
    #[arg(long)]
    cosine: bool,
    #[arg(long, value_enum, value_name = "METHOD")]
    commutativity: Option<MethodArg>,
    #[command(flatten)]
    flags: SharedMergeFlags,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 10)]
    orders: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MethodArg::Opcm, MethodArg::Swa, MethodArg::Ta, MethodArg::Ties])]
    methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Base seed for every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Verify(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<opcm::Error> for Failure {
    fn from(e: opcm::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(a),
        Command::Diag(a) => cmd_diag(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn check_alpha(alpha: f64) -> CmdResult {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(usage(format!("--alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Builds the merger for `method`, rejecting flags that do not apply to it.
fn merger_spec(
    method: MethodArg,
    flags: &SharedMergeFlags,
    num_experts: usize,
) -> Result<MergerSpec, Failure> {
    check_alpha(flags.alpha)?;
    if let Some(l) = flags.lambda {
        if !(l.is_finite() && l >= 0.0) {
            return Err(usage(format!(
                "--lambda must be finite and nonnegative, got {l}"
            )));
        }
        if !matches!(method, MethodArg::Ta | MethodArg::Ties) {
            return Err(usage("--lambda applies to ta and ties only"));
        }
    }
    if let Some(t) = flags.trim {
        if !(t > 0.0 && t <= 1.0) {
            return Err(usage(format!("--trim must lie in (0, 1], got {t}")));
        }
        if method != MethodArg::Ties {
            return Err(usage("--trim applies to ties only"));
        }
    }
    let lambda = flags.lambda.unwrap_or_else(|| default_lambda(num_experts));
    Ok(match method {
        MethodArg::Opcm => {
            let scaling = match flags.scaling {
                ScalingArg::Adaptive => ScalingMode::Adaptive,
                ScalingArg::SqrtT => ScalingMode::SqrtT,
            };
            MergerSpec::Opcm(MergeConfig::with_alpha(flags.alpha).with_scaling(scaling))
        }
        MethodArg::Swa => MergerSpec::Swa,
        MethodArg::Ta => MergerSpec::Ta { lambda },
        MethodArg::Ties => MergerSpec::Ties(TiesConfig {
            trim_fraction: flags.trim.unwrap_or(TiesConfig::default().trim_fraction),
            lambda_scale: lambda,
        }),
    })
}

fn load(path: &Path, pattern: Option<&str>) -> anyhow::Result<Checkpoint> {
    let ckpt = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    match pattern {
        Some(p) => Ok(classify_params(&ckpt, Some(p))?),
        None => Ok(ckpt),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_merge(a: MergeArgs) -> CmdResult {
    let spec = merger_spec(a.method, &a.flags, a.experts.len())?;
    if a.verify && a.method != MethodArg::Opcm {
        return Err(usage("--verify applies to opcm only"));
    }
    for e in &a.experts {
        if *e == a.out || Some(e) == a.report.as_ref() || *e == a.pretrained {
            return Err(usage(format!(
                "output would overwrite input {}",
                e.display()
            )));
        }
    }
    let pattern = a.flags.linear_pattern.as_deref();
    let theta0 = load(&a.pretrained, pattern)?;

    // Experts are read one at a time; only the running state is kept.
    let first = load(&a.experts[0], pattern)?;
    let mut merger = spec.start(&theta0, &first)?;
    let mut closed = match (a.verify, spec) {
        (true, MergerSpec::Opcm(cfg)) => {
            let mut c = ClosedFormMerge::new(&theta0, cfg)?;
            c.push(&first)?;
            Some(c)
        }
        _ => None,
    };
    drop(first);
    for path in &a.experts[1..] {
        let expert = load(path, pattern)?;
        merger.step(&expert)?;
        if let Some(c) = closed.as_mut() {
            c.push(&expert)?;
        }
    }

    let steps = merger.log().to_vec();
    let verification = match closed {
        Some(c) => {
            let reference = c.finish()?;
            let deviation = max_relative_deviation(merger.merged(), &reference)?;
            let ratio = steps
                .iter()
                .map(|r| r.orthogonality_ratio)
                .fold(0.0, f64::max);
            Some(Verification {
                max_relative_deviation: deviation,
                max_orthogonality_ratio: ratio,
                tolerance_deviation: VERIFY_DEVIATION,
                tolerance_orthogonality: VERIFY_ORTHOGONALITY,
                passed: deviation <= VERIFY_DEVIATION && ratio <= VERIFY_ORTHOGONALITY,
            })
        }
        None => None,
    };

    let mut merged = merger.into_model();
    merged.set_metadata("merge_method", spec.name());
    merged.set_metadata("num_experts", a.experts.len().to_string());
    let dtype = match a.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    save_checkpoint(&merged, &a.out, dtype)
        .with_context(|| format!("writing {}", a.out.display()))?;

    let report = MergeReport {
        steps,
        acc: None,
        bwt: None,
        verification: verification.clone(),
    };
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    match verification {
        Some(v) if !v.passed => Err(Failure::Verify(format!(
            "deviation from the general-term formula {:e} (tolerance {:e}), orthogonality ratio {:e} (tolerance {:e})",
            v.max_relative_deviation, v.tolerance_deviation, v.max_orthogonality_ratio, v.tolerance_orthogonality
        ))),
        _ => Ok(()),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_diag(a: DiagArgs) -> CmdResult {
    let spec = match a.commutativity {
        Some(m) => Some(merger_spec(m, &a.flags, 2)?),
        None => {
            check_alpha(a.flags.alpha)?;
            None
        }
    };
    let pattern = a.flags.linear_pattern.as_deref();
    let theta0 = load(&a.pretrained, pattern)?;
    let experts = a
        .experts
        .iter()
        .map(|p| load(p, pattern))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let names: Vec<String> = a.experts.iter().map(|p| stem(p)).collect();

    let text = match spec {
        None => {
            let tvs = experts
                .iter()
                .map(|e| task_vector(e, &theta0))
                .collect::<opcm::Result<Vec<_>>>()?;
            let sim = cosine_similarity_matrix(&tvs)?;
            for &i in &sim.zero_vectors {
                eprintln!(
                    "note: task vector of {} is zero; its similarities are reported as 0",
                    names[i]
                );
            }
            sim.to_csv(&names)
        }
        Some(spec) => {
            let mut text = String::from("expert_a,expert_b,gap\n");
            for i in 0..experts.len() {
                for j in (i + 1)..experts.len() {
                    let gap = commutativity_gap(&theta0, &experts[i], &experts[j], &spec)?;
                    text.push_str(&format!("{},{},{}\n", names[i], names[j], gap));
                }
            }
            text
        }
    };
    emit(a.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    check_alpha(a.alpha)?;
    if a.tasks < 2 {
        return Err(usage("--tasks must be at least 2"));
    }
    if a.seeds == 0 || a.orders == 0 {
        return Err(usage("--seeds and --orders must be at least 1"));
    }
    if a.methods.is_empty() {
        return Err(usage("--methods must name at least one method"));
    }
    let mut cfg = BenchConfig {
        tasks: a.tasks,
        seeds: a.seeds,
        orders: a.orders,
        base_seed: a.seed,
        methods: a
            .methods
            .iter()
            .map(|m| match m {
                MethodArg::Opcm => Method::Opcm,
                MethodArg::Swa => Method::Swa,
                MethodArg::Ta => Method::Ta,
                MethodArg::Ties => Method::Ties,
            })
            .collect(),
        ..BenchConfig::default()
    };
    cfg.merge.alpha = a.alpha;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let report = run_benchmark(&cfg)?;
    let matrices = a.out.join("matrices");
    let runs_dir = matrices.join("runs");
    fs::create_dir_all(&runs_dir).with_context(|| format!("creating {}", runs_dir.display()))?;
    write_json(&a.out.join("report.json"), &report)?;
    for m in &cfg.methods {
        if let Some(csv) = report.mean_matrix_csv(*m) {
            fs::write(a.out.join(&report.matrices[m.name()]), csv)
                .context("writing mean matrix")?;
        }
    }
    for r in &report.runs {
        let path = runs_dir.join(format!(
            "{}_seed{}_order{}.csv",
            r.method.name(),
            r.seed_index,
            r.order_index
        ));
        fs::write(&path, r.matrix.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    for (name, s) in &report.per_method {
        eprintln!(
            "{name:>5}: ACC {:.2} ± {:.2}  BWT {:.2} ± {:.2}",
            100.0 * s.acc_mean,
            100.0 * s.acc_std,
            100.0 * s.bwt_mean,
            100.0 * s.bwt_std
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    kind: opcm::ParamKind,
    dtype: DType,
    numel: usize,
    norm: f64,
}

#[derive(Serialize)]
struct Inspection<'a> {
    metadata: &'a std::collections::BTreeMap<String, String>,
    tensors: Vec<TensorInfo>,
    total_params: usize,
    global_norm: f64,
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let ckpt = load(&a.ckpt, None)?;
    let tensors = ckpt
        .iter()
        .map(|(name, p)| TensorInfo {
            name: name.clone(),
            shape: p.tensor.shape().to_vec(),
            kind: p.kind,
            dtype: p.tensor.dtype(),
            numel: p.tensor.numel(),
            norm: p.tensor.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect();
    let info = Inspection {
        metadata: ckpt.metadata(),
        tensors,
        total_params: ckpt.numel(),
        global_norm: global_norm(&ckpt),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&info).map_err(anyhow::Error::from)?
    );
    Ok(())
}

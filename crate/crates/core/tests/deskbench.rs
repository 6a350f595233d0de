use opcm::deskbench::{
    evaluate_accuracy, finetune, gen_task, pretrain, run_benchmark, BenchConfig, Method,
    SyntheticTask, TaskConfig, TaskHead, TinyMLP, TrainConfig,
};
use opcm::{Checkpoint, ParamKind, Tensor};

/// Fine-tuned accuracies on tasks 200..208 with the default budget: lowest
/// 0.77, mean 0.97. Both floors sit a little under those.
const FINETUNE_FLOOR: f64 = 0.75;
const FINETUNE_MEAN_FLOOR: f64 = 0.9;

fn tasks(cfg: &TaskConfig, n: usize, base: u64) -> Vec<(SyntheticTask, TaskHead)> {
    (0..n)
        .map(|i| gen_task(base + i as u64, cfg).unwrap())
        .collect()
}

#[test]
fn pretrain_is_deterministic_and_zero_steps_is_init() {
    let cfg = TaskConfig::default();
    let ts = tasks(&cfg, 3, 100);
    let short = TrainConfig {
        steps: 20,
        ..TrainConfig::pretrain_default()
    };
    let a = pretrain(7, cfg.input_dim, cfg.hidden, &ts, &short).unwrap();
    let b = pretrain(7, cfg.input_dim, cfg.hidden, &ts, &short).unwrap();
    assert_eq!(a, b);
    let zero = TrainConfig {
        steps: 0,
        ..TrainConfig::pretrain_default()
    };
    let c = pretrain(7, cfg.input_dim, cfg.hidden, &ts, &zero).unwrap();
    assert_eq!(c, TinyMLP::init(7, cfg.input_dim, cfg.hidden).unwrap());
    assert!(pretrain(7, cfg.input_dim, cfg.hidden, &[], &zero).is_err());
}

#[test]
fn default_training_budgets() {
    let cfg = BenchConfig::default();
    let ts = tasks(&cfg.task, cfg.tasks, 200);
    let pre = pretrain(3, cfg.task.input_dim, cfg.task.hidden, &ts, &cfg.pretrain).unwrap();
    let chance = 1.0 / cfg.task.classes as f64;
    let mut after_sum = 0.0;
    for (i, (t, h)) in ts.iter().enumerate() {
        let before = evaluate_accuracy(&pre, t, h, cfg.n_test).unwrap();
        assert!(before > chance + 0.05, "task {i}: pretrained {before}");
        let expert = finetune(&pre, t, h, &cfg.finetune).unwrap();
        let after = evaluate_accuracy(&expert, t, h, cfg.n_test).unwrap();
        assert!(after >= FINETUNE_FLOOR, "task {i}: fine-tuned {after}");
        assert!(after >= before, "task {i}: {after} < {before}");
        after_sum += after;
    }
    let n = cfg.tasks as f64;
    assert!(
        after_sum / n >= FINETUNE_MEAN_FLOOR,
        "fine-tuned mean {}",
        after_sum / n
    );
}

#[test]
fn zero_step_finetune_is_identity() {
    let cfg = TaskConfig::default();
    let (t, h) = gen_task(5, &cfg).unwrap();
    let theta0 = TinyMLP::init(1, cfg.input_dim, cfg.hidden).unwrap();
    let zero = TrainConfig {
        steps: 0,
        ..TrainConfig::finetune_default()
    };
    assert_eq!(finetune(&theta0, &t, &h, &zero).unwrap(), theta0);
}

/// A trunk with zero weights outputs `tanh(b2)` for every input, so the
/// predicted class is fixed and accuracy is that class's share of labels.
#[test]
fn constant_trunk_scores_its_class_frequency() {
    let cfg = TaskConfig::default();
    let (d, hdim) = (cfg.input_dim, cfg.hidden);
    let (t, head) = gen_task(9, &cfg).unwrap();
    let b2: Vec<f64> = (0..hdim)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0)
        .collect();
    let trunk = Checkpoint::new()
        .with(
            "b1",
            Tensor::new(vec![hdim], vec![0.0; hdim]).unwrap(),
            ParamKind::Other,
        )
        .unwrap()
        .with(
            "b2",
            Tensor::new(vec![hdim], b2.clone()).unwrap(),
            ParamKind::Other,
        )
        .unwrap()
        .with(
            "w1",
            Tensor::new(vec![hdim, d], vec![0.0; hdim * d]).unwrap(),
            ParamKind::LinearWeight,
        )
        .unwrap()
        .with(
            "w2",
            Tensor::new(vec![hdim, hdim], vec![0.0; hdim * hdim]).unwrap(),
            ParamKind::LinearWeight,
        )
        .unwrap();
    let model = TinyMLP::from_checkpoint(trunk).unwrap();

    let z: Vec<f64> = b2.iter().map(|v| v.tanh()).collect();
    let scores: Vec<f64> = head
        .weights
        .chunks(hdim)
        .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect();
    let class =
        (0..scores.len()).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });

    let n = 512;
    let labels = t.test_set(n).labels;
    let expected = labels.iter().filter(|&&y| y == class).count() as f64 / n as f64;
    assert_eq!(expected, 0.25);
    assert_eq!(evaluate_accuracy(&model, &t, &head, n).unwrap(), expected);
    let once = evaluate_accuracy(&model, &t, &head, 1).unwrap();
    assert!(once == 0.0 || once == 1.0);
}

fn small_config() -> BenchConfig {
    BenchConfig {
        tasks: 3,
        seeds: 2,
        orders: 2,
        pretrain: TrainConfig {
            steps: 60,
            ..TrainConfig::pretrain_default()
        },
        finetune: TrainConfig {
            steps: 60,
            ..TrainConfig::finetune_default()
        },
        n_test: 128,
        ..BenchConfig::default()
    }
}

#[test]
fn swa_of_identical_experts_keeps_their_accuracy() {
    let cfg = BenchConfig {
        tasks: 2,
        seeds: 1,
        orders: 1,
        methods: vec![Method::Swa],
        finetune: TrainConfig {
            steps: 0,
            ..TrainConfig::finetune_default()
        },
        ..small_config()
    };
    let report = run_benchmark(&cfg).unwrap();
    let run = &report.runs[0];
    let expert = &report.seeds[0].expert_acc;
    let single = expert.iter().sum::<f64>() / expert.len() as f64;
    assert_eq!(run.acc, single);
    assert_eq!(run.bwt, 0.0);
}

#[test]
fn report_is_deterministic_across_thread_counts() {
    let cfg = small_config();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_benchmark(&cfg).unwrap());
    let parallel = run_benchmark(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&serial).unwrap(),
        serde_json::to_string(&parallel).unwrap()
    );
}

#[test]
fn report_shape_and_invariants() {
    let cfg = small_config();
    let report = run_benchmark(&cfg).unwrap();
    assert_eq!(report.per_method.len(), 4);
    assert_eq!(report.runs.len(), cfg.seeds * 4 * cfg.orders);
    for run in &report.runs {
        assert_eq!(run.matrix.num_tasks(), cfg.tasks);
        if run.method == Method::Opcm {
            // The step-1 merge is the first expert itself.
            let first = run.order[0];
            assert_eq!(
                run.matrix.get(0, 0),
                Some(report.seeds[run.seed_index].expert_acc[first])
            );
            assert!(run.max_orthogonality_ratio.unwrap() <= 1e-8);
            assert_eq!(run.lambda.len(), cfg.tasks);
        }
    }
    let csv = report.mean_matrix_csv(Method::Opcm).unwrap();
    assert_eq!(csv.lines().count(), cfg.tasks + 1);
}

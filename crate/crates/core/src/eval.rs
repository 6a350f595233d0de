//! Metrics over merge runs: accuracy matrices, average accuracy, backward
//! transfer, cosine similarity of task vectors, order sensitivity and the
//! per-step orthogonality report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::StepRecord;
use crate::sequential::MergerSpec;
use crate::tensor::{distance, Checkpoint, ParamSet, TaskVector};

/// Cell `(i, j)` is the accuracy of the step-`i` merged model on task `j`,
/// as a fraction. Indices are 0-based here; step `i` means "after `i + 1`
/// experts".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: Vec<String>,
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    /// An empty `T×T` matrix for the named tasks.
    pub fn new(tasks: Vec<String>) -> Self {
        let t = tasks.len();
        Self {
            tasks,
            cells: vec![vec![None; t]; t],
        }
    }

    /// Tasks named `task_1 … task_T`.
    pub fn with_size(t: usize) -> Self {
        Self::new((1..=t).map(|i| format!("task_{i}")).collect())
    }

    /// Builds a fully populated matrix from rows of fractions.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::with_size(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::BadDims(format!(
                    "row {i} has {} cells, expected {}",
                    row.len(),
                    rows.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.tasks
    }

    pub fn set(&mut self, step: usize, task: usize, value: f64) -> Result<()> {
        let t = self.num_tasks();
        if step >= t || task >= t {
            return Err(Error::BadDims(format!(
                "cell ({step}, {task}) outside a {t}×{t} matrix"
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidConfig(format!(
                "accuracy {value} outside [0, 1]"
            )));
        }
        self.cells[step][task] = Some(value);
        Ok(())
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.cells.get(step)?.get(task).copied().flatten()
    }

    fn require(&self, step: usize, task: usize) -> Result<f64> {
        self.get(step, task)
            .ok_or(Error::MissingCell { step, task })
    }

    /// Row `step` as fractions; missing cells are `None`.
    pub fn row(&self, step: usize) -> &[Option<f64>] {
        &self.cells[step]
    }

    /// CSV with a header of task names and one row per merge step, values in
    /// percent. Missing cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = self.tasks.join(",");
        out.push('\n');
        for row in &self.cells {
            let line: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| format!("{}", v * 100.0)).unwrap_or_default())
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Mean of the last row.
pub fn avg_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let mut sum = 0.0;
    for j in 0..t {
        sum += m.require(t - 1, j)?;
    }
    Ok(sum / t as f64)
}

/// `Σ_{i<T} (cell(T, i) − cell(i, i)) / (T − 1)`.
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks();
    if t < 2 {
        return Err(Error::TooFewTasks);
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += m.require(t - 1, i)? - m.require(i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    /// Indices of all-zero task vectors; their rows and columns are 0.
    pub zero_vectors: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = names.join(",");
        out.push('\n');
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pairwise cosine similarity of flattened task vectors.
pub fn cosine_similarity_matrix(tvs: &[TaskVector]) -> Result<SimilarityMatrix> {
    let first = tvs.first().ok_or(Error::EmptySequence)?;
    for tv in &tvs[1..] {
        first.check_schema(tv)?;
    }
    let flat: Vec<Vec<f64>> = tvs.iter().map(|tv| tv.flat_values().collect()).collect();
    // Squared norms: for identical vectors `dot / sqrt(n²)` is then exactly 1.
    let norms: Vec<f64> = flat
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>())
        .collect();
    let n = tvs.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        values[i][i] = 1.0;
        for j in (i + 1)..n {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = flat[i].iter().zip(&flat[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j]).sqrt()).clamp(-1.0, 1.0);
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    let zero_vectors = (0..n).filter(|&i| norms[i] == 0.0).collect();
    Ok(SimilarityMatrix {
        values,
        zero_vectors,
    })
}

/// `‖merge(A, B) − merge(B, A)‖₂` for the given merger.
pub fn commutativity_gap(
    theta0: &Checkpoint,
    a: &Checkpoint,
    b: &Checkpoint,
    merger: &MergerSpec,
) -> Result<f64> {
    let ab = merger.run(theta0, [a, b])?.into_model();
    let ba = merger.run(theta0, [b, a])?.into_model();
    distance(&ab, &ba)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityRow {
    pub step: usize,
    pub lambda: f64,
    pub sqrt_t: f64,
    pub avg_norm: f64,
    pub merged_distance: f64,
    pub residual: f64,
    pub ratio: f64,
    pub degenerate: bool,
}

pub fn orthogonality_report(log: &[StepRecord]) -> Vec<OrthogonalityRow> {
    log.iter()
        .map(|r| OrthogonalityRow {
            step: r.step,
            lambda: r.lambda,
            sqrt_t: (r.step as f64).sqrt(),
            avg_norm: r.avg_norm,
            merged_distance: r.merged_distance,
            residual: r.orthogonality_residual,
            ratio: r.orthogonality_ratio,
            degenerate: r.degenerate,
        })
        .collect()
}

/// CSV form of [`orthogonality_report`].
pub fn orthogonality_csv(rows: &[OrthogonalityRow]) -> String {
    let mut out =
        String::from("step,lambda,sqrt_t,avg_norm,merged_distance,residual,ratio,degenerate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.lambda,
            r.sqrt_t,
            r.avg_norm,
            r.merged_distance,
            r.residual,
            r.ratio,
            r.degenerate
        );
    }
    out
}

/// JSON report written next to a merged checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub steps: Vec<StepRecord>,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<Verification>,
}

/// Cross-check of an iterative merge against the general-term formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub max_relative_deviation: f64,
    pub max_orthogonality_ratio: f64,
    pub tolerance_deviation: f64,
    pub tolerance_orthogonality: f64,
    pub passed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::TiesConfig;
    use crate::merge::MergeConfig;
    use crate::tensor::{task_vector, ParamKind, Tensor};

    fn two_task() -> AccuracyMatrix {
        let mut m = AccuracyMatrix::with_size(2);
        m.set(0, 0, 0.9).unwrap();
        m.set(1, 0, 0.8).unwrap();
        m.set(1, 1, 0.85).unwrap();
        m
    }

    fn tv(v: &[f64]) -> TaskVector {
        let c = |v: Vec<f64>| {
            Checkpoint::new()
                .with(
                    "p",
                    Tensor::new(vec![v.len()], v).unwrap(),
                    ParamKind::Other,
                )
                .unwrap()
        };
        task_vector(&c(v.to_vec()), &c(vec![0.0; v.len()])).unwrap()
    }

    #[test]
    fn avg_accuracy_examples() {
        assert_eq!(avg_accuracy(&two_task()).unwrap(), 0.825);
        assert_eq!(
            avg_accuracy(&AccuracyMatrix::from_rows(&vec![vec![1.0; 3]; 3]).unwrap()).unwrap(),
            1.0
        );
        assert_eq!(
            avg_accuracy(&AccuracyMatrix::from_rows(&[vec![0.9]]).unwrap()).unwrap(),
            0.9
        );
        let mut m = AccuracyMatrix::with_size(2);
        m.set(1, 0, 0.5).unwrap();
        assert!(matches!(
            avg_accuracy(&m),
            Err(Error::MissingCell { step: 1, task: 1 })
        ));
    }

    #[test]
    fn bwt_examples() {
        assert_eq!(backward_transfer(&two_task()).unwrap(), (0.8 - 0.9) / 1.0);
        let m = AccuracyMatrix::from_rows(&[vec![0.7, 0.2], vec![0.7, 0.6]]).unwrap();
        assert_eq!(backward_transfer(&m).unwrap(), 0.0);
        let one = AccuracyMatrix::from_rows(&[vec![0.9]]).unwrap();
        assert!(matches!(backward_transfer(&one), Err(Error::TooFewTasks)));
    }

    #[test]
    fn accuracy_range_checked() {
        let mut m = AccuracyMatrix::with_size(2);
        assert!(m.set(0, 0, 1.5).is_err());
        assert!(m.set(2, 0, 0.5).is_err());
    }

    #[test]
    fn csv_is_percent() {
        let csv = two_task().to_csv();
        assert_eq!(csv, "task_1,task_2\n90,\n80,85\n");
    }

    #[test]
    fn cosine_examples() {
        let s = cosine_similarity_matrix(&[tv(&[1.0, 2.0]), tv(&[1.0, 2.0])]).unwrap();
        assert_eq!(s.values, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let s = cosine_similarity_matrix(&[tv(&[1.0, 0.0]), tv(&[0.0, 3.0])]).unwrap();
        assert_eq!(s.values[0][1], 0.0);
        let s = cosine_similarity_matrix(&[tv(&[1.0, -2.0]), tv(&[-1.0, 2.0])]).unwrap();
        assert_eq!(s.values[0][1], -1.0);
        let s = cosine_similarity_matrix(&[tv(&[0.0, 0.0]), tv(&[1.0, 1.0])]).unwrap();
        assert_eq!(s.values, vec![vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(s.zero_vectors, vec![0]);
    }

    #[test]
    fn cosine_rejects_mismatch() {
        assert!(matches!(
            cosine_similarity_matrix(&[tv(&[1.0]), tv(&[1.0, 2.0])]),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn commutative_mergers() {
        let c = |v: [f64; 3]| {
            Checkpoint::new()
                .with(
                    "w",
                    Tensor::new(vec![3], v.to_vec()).unwrap(),
                    ParamKind::Other,
                )
                .unwrap()
        };
        let (z, a, b) = (c([0.1, 0.2, 0.3]), c([1.0, -2.0, 0.5]), c([0.3, 0.7, -1.1]));
        assert!(commutativity_gap(&z, &a, &b, &MergerSpec::Ta { lambda: 0.3 }).unwrap() <= 1e-12);
        assert!(commutativity_gap(&z, &a, &b, &MergerSpec::Swa).unwrap() <= 1e-12);
        let ties = MergerSpec::Ties(TiesConfig::default());
        assert!(commutativity_gap(&z, &a, &b, &ties).unwrap().is_finite());
        let opcm = MergerSpec::Opcm(MergeConfig::default());
        assert!(commutativity_gap(&z, &a, &b, &opcm).unwrap() >= 0.0);
    }

    #[test]
    fn report_rows() {
        assert!(orthogonality_report(&[]).is_empty());
        let rec = StepRecord {
            step: 4,
            lambda: 2.0,
            avg_norm: 1.0,
            incoming_norm: 1.0,
            orthogonality_residual: 0.0,
            orthogonality_ratio: 0.0,
            merged_distance: 1.0,
            degenerate: false,
        };
        let rows = orthogonality_report(&[rec]);
        assert_eq!(rows[0].sqrt_t, 2.0);
        assert!(orthogonality_csv(&rows).starts_with("step,lambda"));
    }
}

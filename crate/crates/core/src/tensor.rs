//! Tensors, checkpoints and task vectors.
//!
//! Every container here keeps its parameters in a `BTreeMap`, so iteration
//! (and therefore every reduction built on top of it) runs in lexicographic
//! name order no matter how the checkpoint was assembled.

use std::collections::btree_map;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor on disk. Values are always held as `f64`
/// in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// How a parameter is treated during merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Weight matrix of a linear layer; merged through the orthogonal projector.
    LinearWeight,
    /// Everything else (biases, norms, embeddings, ...); merged without projection.
    Other,
}

/// Dense row-major tensor with finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(DType::F64, shape, data)
    }

    pub fn with_dtype(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::BadDims(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadDims(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            dtype: DType::F64,
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Callers must keep every value finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True for 2-D tensors whose dimensions are both at least 2, the only
    /// shape the projector accepts.
    pub fn is_projectable(&self) -> bool {
        self.shape.len() == 2 && self.shape[0] >= 2 && self.shape[1] >= 2
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Read access shared by [`Checkpoint`] and [`TaskVector`].
pub trait ParamSet {
    fn params(&self) -> &BTreeMap<String, Param>;

    fn get(&self, name: &str) -> Option<&Param> {
        self.params().get(name)
    }

    fn iter(&self) -> btree_map::Iter<'_, String, Param> {
        self.params().iter()
    }

    fn len(&self) -> usize {
        self.params().len()
    }

    fn is_empty(&self) -> bool {
        self.params().is_empty()
    }

    /// Total number of scalar values.
    fn numel(&self) -> usize {
        self.params().values().map(|p| p.tensor.numel()).sum()
    }

    /// Every scalar, walked in lexicographic name order then row-major.
    fn flat_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(
            self.params()
                .values()
                .flat_map(|p| p.tensor.data().iter().copied()),
        )
    }

    /// Ok iff both sets have identical names, shapes and kinds.
    fn check_schema<P: ParamSet + ?Sized>(&self, other: &P) -> Result<()>
    where
        Self: Sized,
    {
        check_schema(self.params(), other.params())
    }
}

pub(crate) fn check_schema(a: &BTreeMap<String, Param>, b: &BTreeMap<String, Param>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} parameters vs {}",
            a.len(),
            b.len()
        )));
    }
    for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(Error::SchemaMismatch(format!("parameter `{na}` vs `{nb}`")));
        }
        if pa.tensor.shape() != pb.tensor.shape() {
            return Err(Error::SchemaMismatch(format!(
                "`{na}` has shape {:?} vs {:?}",
                pa.tensor.shape(),
                pb.tensor.shape()
            )));
        }
        if pa.kind != pb.kind {
            return Err(Error::SchemaMismatch(format!(
                "`{na}` is {:?} vs {:?}",
                pa.kind, pb.kind
            )));
        }
    }
    Ok(())
}

/// A named collection of tensors plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    params: BTreeMap<String, Param>,
    metadata: BTreeMap<String, String>,
}

impl ParamSet for Checkpoint {
    fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }
}

fn validate_kind(name: &str, tensor: &Tensor, kind: ParamKind) -> Result<()> {
    if kind == ParamKind::LinearWeight && !tensor.is_projectable() {
        return Err(Error::BadDims(format!(
            "`{name}` tagged linear_weight but has shape {:?}",
            tensor.shape()
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        validate_kind(&name, &tensor, kind)?;
        match self.params.entry(name) {
            btree_map::Entry::Occupied(e) => Err(Error::DuplicateName(e.key().clone())),
            btree_map::Entry::Vacant(e) => {
                e.insert(Param { tensor, kind });
                Ok(())
            }
        }
    }

    /// Builder-style [`Checkpoint::insert`].
    pub fn with(
        mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<Self> {
        self.insert(name, tensor, kind)?;
        Ok(self)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub(crate) fn from_parts(
        params: BTreeMap<String, Param>,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        Self { params, metadata }
    }

    /// Returns a copy with each tensor's values replaced by `f(name, values)`.
    pub(crate) fn map_values(&self, mut f: impl FnMut(&str, &[f64]) -> Vec<f64>) -> Checkpoint {
        let params = self
            .params
            .iter()
            .map(|(name, p)| {
                let data = f(name, p.tensor.data());
                let tensor = Tensor {
                    dtype: p.tensor.dtype,
                    shape: p.tensor.shape.clone(),
                    data,
                };
                (
                    name.clone(),
                    Param {
                        tensor,
                        kind: p.kind,
                    },
                )
            })
            .collect();
        Checkpoint {
            params,
            metadata: self.metadata.clone(),
        }
    }

    /// `self + scale * tv`, elementwise.
    pub fn add_scaled(&self, tv: &TaskVector, scale: f64) -> Result<Checkpoint> {
        check_schema(&self.params, &tv.params)?;
        Ok(self.map_values(|name, base| {
            let delta = tv.params[name].tensor.data();
            base.iter().zip(delta).map(|(b, d)| b + scale * d).collect()
        }))
    }
}

/// Per-parameter difference between a checkpoint and the pretrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    params: BTreeMap<String, Param>,
}

impl ParamSet for TaskVector {
    fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }
}

impl TaskVector {
    /// Same schema as `template`, values from `data` in flat order.
    pub(crate) fn from_flat<P: ParamSet>(template: &P, data: &[f64]) -> Self {
        let mut offset = 0;
        let params = template
            .params()
            .iter()
            .map(|(name, p)| {
                let n = p.tensor.numel();
                let tensor = Tensor {
                    dtype: DType::F64,
                    shape: p.tensor.shape.clone(),
                    data: data[offset..offset + n].to_vec(),
                };
                offset += n;
                (
                    name.clone(),
                    Param {
                        tensor,
                        kind: p.kind,
                    },
                )
            })
            .collect();
        Self { params }
    }

    pub fn norm(&self) -> f64 {
        global_norm(self)
    }

    /// Flattened inner product; schemas must match.
    pub fn dot(&self, other: &TaskVector) -> Result<f64> {
        check_schema(&self.params, &other.params)?;
        Ok(self
            .flat_values()
            .zip(other.flat_values())
            .map(|(a, b)| a * b)
            .sum())
    }
}

/// Tags every projectable 2-D tensor as [`ParamKind::LinearWeight`] and
/// everything else as [`ParamKind::Other`]. With a glob `pattern`, only
/// matching names are eligible for `LinearWeight`.
pub fn classify_params(ckpt: &Checkpoint, pattern: Option<&str>) -> Result<Checkpoint> {
    let pattern = pattern
        .map(glob::Pattern::new)
        .transpose()
        .map_err(|e| Error::InvalidConfig(format!("bad name pattern: {e}")))?;
    let mut out = ckpt.clone();
    for (name, param) in out.params_mut().iter_mut() {
        let eligible = pattern.as_ref().is_none_or(|p| p.matches(name));
        param.kind = if eligible && param.tensor.is_projectable() {
            ParamKind::LinearWeight
        } else {
            ParamKind::Other
        };
    }
    Ok(out)
}

/// `theta_t - theta_0`, per parameter.
pub fn task_vector(theta_t: &Checkpoint, theta_0: &Checkpoint) -> Result<TaskVector> {
    check_schema(&theta_t.params, &theta_0.params)?;
    let params = theta_t
        .params
        .iter()
        .map(|(name, p)| {
            let base = theta_0.params[name].tensor.data();
            let data = p
                .tensor
                .data()
                .iter()
                .zip(base)
                .map(|(a, b)| a - b)
                .collect();
            let tensor = Tensor {
                dtype: DType::F64,
                shape: p.tensor.shape.clone(),
                data,
            };
            (
                name.clone(),
                Param {
                    tensor,
                    kind: p.kind,
                },
            )
        })
        .collect();
    Ok(TaskVector { params })
}

/// Euclidean norm of the flattened parameter set.
pub fn global_norm<P: ParamSet + ?Sized>(tv: &P) -> f64 {
    tv.flat_values().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖₂` over the flattened sets without materializing the difference.
pub fn distance(a: &Checkpoint, b: &Checkpoint) -> Result<f64> {
    check_schema(&a.params, &b.params)?;
    Ok(a.flat_values()
        .zip(b.flat_values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Largest per-parameter relative difference `‖a − b‖ / max(‖a‖, ‖b‖)`,
/// with `0/0` read as 0.
pub fn max_relative_deviation(a: &Checkpoint, b: &Checkpoint) -> Result<f64> {
    check_schema(&a.params, &b.params)?;
    Ok(a.params
        .values()
        .zip(b.params.values())
        .map(|(pa, pb)| {
            let (x, y) = (pa.tensor.data(), pb.tensor.data());
            let diff = x
                .iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
            let scale = norm(x).max(norm(y));
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max))
}

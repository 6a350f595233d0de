//! Training-free continual merging of fine-tuned checkpoints.
//!
//! Experts arrive one at a time. Each weight-matrix task vector is projected
//! onto the subspace orthogonal to the current merged task vector, then the
//! running sum is rescaled so the merged model stays at a stable distance
//! from the pretrained one. Baseline mergers, evaluation metrics and a small
//! synthetic benchmark live alongside.

pub mod baselines;
pub mod deskbench;
pub mod error;
pub mod eval;
pub mod format;
pub mod linalg;
pub mod merge;
pub mod sequential;
pub mod tensor;

pub use error::{Error, Result};
pub use format::{load_checkpoint, save_checkpoint};
pub use tensor::{
    classify_params, distance, global_norm, max_relative_deviation, task_vector, Checkpoint, DType,
    Param, ParamKind, ParamSet, TaskVector, Tensor,
};

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed checkpoint file: {0}")]
    MalformedFile(String),

    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("matrix contains NaN or infinite entries")]
    NonFinite,

    #[error("no experts to merge")]
    EmptySequence,

    #[error("accuracy matrix cell ({step}, {task}) is missing")]
    MissingCell { step: usize, task: usize },

    #[error("backward transfer needs at least two tasks")]
    TooFewTasks,

    #[error("bad dimensions: {0}")]
    BadDims(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::io;

use thiserror::Error;

/// Failures raised by tensor construction, differentiable operations and
/// the tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("tensor is not recorded on a differentiation tape")]
    NoTape,
    #[error("tape was already consumed by a backward pass")]
    TapeConsumed,
    #[error("operands are recorded on different tapes")]
    TapeMismatch,
    #[error("{0}: standard deviation must be strictly positive")]
    NonPositiveSigma(&'static str),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Top-level error type for everything above the tensor engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

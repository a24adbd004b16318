use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {field}: {constraint}")]
    Config { field: String, constraint: String },
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64, last_good: Box<Checkpoint> },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("vocabulary integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}

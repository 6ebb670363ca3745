use thiserror::Error;

use irag_index::{ClientError, IndexError};
use irag_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] ClientError),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad data file {path}: {msg}")]
    Data { path: String, msg: String },
    #[error("non-finite loss at step {step} (batch ids {ids:?}): {detail}")]
    NonFiniteLoss { step: usize, ids: Vec<usize>, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// True when retrying the same call may succeed (index unreachable).
    pub fn is_retryable(&self) -> bool {
        matches!(self, CoreError::Retrieval(e) if e.is_retryable())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Invalid(msg.into()))
}

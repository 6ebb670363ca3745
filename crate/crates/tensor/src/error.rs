use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty attention row")]
    EmptyRow,
    #[error("head dimension must be even for rotary embedding, got {0}")]
    OddHeadDim(usize),
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("no masked rows for {0}")]
    EmptySelection(&'static str),
    #[error("index {index} out of range for {op} (len {len})")]
    OutOfRange { op: &'static str, index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape { op, detail: detail.into() })
}

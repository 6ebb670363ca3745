use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("empty index")]
    Empty,
    #[error("dim mismatch: index has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate passage id {0}")]
    DuplicateId(u64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("need at least {needed} training vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("bad index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IndexError>;

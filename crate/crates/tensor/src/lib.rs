//! Dense row-major tensors and a reverse-mode tape sized for a small
//! decoder-only transformer.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and in `f64` when gradients are checked against
//! finite differences.

mod error;
pub mod kernels;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::{apply_rope, softmax_rows};
pub use scalar::Scalar;
pub use tape::{RowSpan, Tape, Var};
pub use tensor::Tensor;

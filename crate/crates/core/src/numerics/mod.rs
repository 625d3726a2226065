//! Tensor arithmetic with reverse-mode differentiation and Adam.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks). Execution is single-threaded and deterministic.

mod kernels;
pub mod nn;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{bmm, conv1d, conv2d, log_softmax_last, matmul, permute, softmax, upsample2x};
pub use nn::Session;
pub use optim::{adam_step, Adam, AdamConfig, AdamMoments};
pub use params::{Param, ParamStore};
pub use scalar::{gemm, DType, MatRef, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("kernel of length {kernel} exceeds input of length {input}")]
    KernelTooLong { kernel: usize, input: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;

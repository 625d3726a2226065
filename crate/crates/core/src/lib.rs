//! EEG-conditioned latent diffusion at desk scale.
//!
//! The pipeline pre-trains a transformer encoder on multichannel time series
//! by masked token reconstruction, conditions a small latent denoiser on the
//! encoder output through cross-attention, aligns pooled signal embeddings
//! with a frozen image-embedding space, and scores generations by top-1
//! agreement of an image classifier.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod eval;
mod error;
pub mod msm;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
pub use numerics::{NumError, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;

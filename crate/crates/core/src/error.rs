use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::numerics::NumError;
use crate::signal::io::CorpusError;
use crate::signal::SignalError;

/// Failure of a pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{stage} diverged at step {step}: {detail}")]
    Diverged { stage: &'static str, step: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Maps non-finite tape values to a divergence report for `stage`.
    pub(crate) fn at_step(stage: &'static str, step: usize) -> impl Fn(NumError) -> Error {
        move |e| match e {
            NumError::NonFinite(op) => Error::Diverged { stage, step, detail: format!("non-finite value in {op}") },
            e => Error::Num(e),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

use crate::fixedpoint::PicardState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("Picard iteration did not converge after {iterations} iterations (last residual {last_residual:e})")]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
        state: Box<PicardState>,
    },

    #[error("non-finite value in Picard iterate {iteration}")]
    NotFinite { iteration: usize },

    #[error("particle blow-up at t = {t}: |X| = {radius} exceeds {limit}")]
    BlowUp { t: f64, radius: f64, limit: f64 },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

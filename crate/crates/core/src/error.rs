use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the surrogate pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent metadata for {path}: {reason}")]
    Consistency { path: PathBuf, reason: String },

    #[error("newton iteration did not converge at step {step} (residual {residual:.3e} after {iterations} iterations)")]
    NewtonDivergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("latent integration blew up at step {step} (|z|_inf = {norm:.3e})")]
    BlowUp { step: usize, norm: f64 },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            actual,
        }
    }

    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NewtonDivergence { .. } | Error::Singular(_) | Error::BlowUp { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

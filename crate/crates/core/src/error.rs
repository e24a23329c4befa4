use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value violates its contract.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Input is well-formed but numerically degenerate (zero vector, rank-deficient system, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("problem size {size} exceeds the configured cap {cap}")]
    SizeLimit { size: usize, cap: usize },

    #[error("training failed after exhausting step-size reductions (last loss {last_loss})")]
    TrainingFailed {
        last_loss: f64,
        loss_trace: Vec<f64>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, actual })
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::DimensionMismatch { .. } | Error::SizeLimit { .. }
        )
    }
}

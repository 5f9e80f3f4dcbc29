use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("kernel matrix for {kernel} is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { kernel: String, min_eigenvalue: f64 },

    #[error("kernel recursion: {0}")]
    Kernel(String),

    #[error("chain {chain} diverged at step {step} (non-finite Hamiltonian)")]
    Divergent { chain: usize, step: usize },

    #[error("chain {chain}: no finite log-posterior after {attempts} prior draws")]
    InitFailed { chain: usize, attempts: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn malformed(path: &std::path::Path, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

use crate::symexpr::SymError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sym(#[from] SymError),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{context}: covariance is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { context: String, min_eigenvalue: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{method} does not support this model: {reason}")]
    Unsupported { method: String, reason: String },
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn not_pd(context: impl Into<String>, min_eigenvalue: f64) -> Error {
        Error::NotPositiveDefinite {
            context: context.into(),
            min_eigenvalue,
        }
    }
}

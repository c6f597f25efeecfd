use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dimension: {0}")]
    EmptyDimension(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("correlation undefined: zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("oracle limit exceeded: {n} parameters (limit {limit})")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("acceptance assertion failed: {0}")]
    OracleMismatch(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn mismatch(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            Error::OracleMismatch(_) => 4,
            _ => 2,
        }
    }
}

//! Error type shared across the crate.
//!
//! The CLI maps these variants onto process exit codes: I/O failures
//! exit with 2, configuration and schema problems with 3, numerical
//! divergence with 4, and internal oracle failures with 5.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (lambda*penalty = {penalty_magnitude:e})")]
    Diverged { epoch: usize, penalty_magnitude: f64 },

    #[error("oracle check failed: {0}")]
    Oracle(String),
}

impl Error {
    /// Wrap an `std::io::Error` with the path it occurred on.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv(_) => 2,
            Error::Json(_)
            | Error::Shape { .. }
            | Error::InvalidInput(_)
            | Error::Schema(_)
            | Error::Config(_) => 3,
            Error::NonFinite(_) | Error::Diverged { .. } => 4,
            Error::Oracle(_) => 5,
        }
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible filters: {0}")]
    IncompatibleFilter(String),

    #[error("deserialization failed: {0}")]
    Deserialize(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("sweep run failed at epsilon={epsilon}, rep={rep}: {message}")]
    Sweep {
        epsilon: f64,
        rep: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (bad value, unknown key, vocab overflow, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint or data file failed validation on load.
    #[error("corrupt file: {0}")]
    Corruption(String),

    /// A numeric computation produced non-finite values or hit a degenerate
    /// denominator.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A metric is undefined on the given input (single-class labels,
    /// zero-variance correlation, ...).
    #[error("undefined metric: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

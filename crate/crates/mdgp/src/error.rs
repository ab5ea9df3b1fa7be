//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, data handling, and inference.
#[derive(Debug, Error)]
pub enum Error {
    /// Formula text could not be parsed.
    #[error("formula error: {0}")]
    Formula(String),

    /// A kernel expression, parameter set, or covariate space is inconsistent.
    #[error("model error: {0}")]
    Model(String),

    /// Input data failed validation (schema, types, ranges).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical operation could not be completed (non-PSD matrix,
    /// failed factorization, non-finite intermediate).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Sampler configuration or runtime failure.
    #[error("sampler error: {0}")]
    Sampler(String),

    /// Run configuration file is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV read/write failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// JSON serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

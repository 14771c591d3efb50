//! Error taxonomy shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameter, unknown name, invalid flag combination).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or layer shapes do not compose.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN/Inf was produced where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was called outside its contract (e.g. backward with a stale cache).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates its documented invariants.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be decoded; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// A structural pruning request conflicts with the layer policy.
    #[error("policy error: {0}")]
    Policy(String),

    /// An argument fell outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

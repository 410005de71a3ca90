//! Error types shared across the simulator.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad field value, unknown key).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes or architectures do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A binary or text input could not be decoded; names the offending field.
    #[error("parse error in {field}: {reason}")]
    Parse { field: String, reason: String },

    /// A dataset cannot be split as requested.
    #[error("partition error: {0}")]
    Partition(String),

    /// Class-distribution estimation is undefined (all-zero final layer).
    #[error("estimation error: final-layer weight rows are all zero")]
    ZeroFinalLayer,

    /// A computation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Pearson correlation is undefined for the given matrices.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

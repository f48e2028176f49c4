//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by linear algebra, optimizer, and harness operations.
#[derive(Debug, Error)]
pub enum KronoptError {
    /// Input matrix contains non-finite entries or has an invalid shape.
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// Dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    DimError(String),

    /// A quantity with zero Frobenius norm where a positive norm is required.
    #[error("zero norm: {0}")]
    ZeroNorm(String),

    /// Negative matrix power requested on a zero (or negative) eigenvalue.
    #[error("singular factor: {0}")]
    SingularFactor(String),

    /// Element-wise division by a zero scale with a nonzero numerator.
    #[error("divergent scale: {0}")]
    DivergentScale(String),

    /// Trace scaling requested with a zero-trace factor.
    #[error("zero trace: {0}")]
    ZeroTrace(String),

    /// A scaling matrix with non-positive entries where positivity is required.
    #[error("non-positive scale: {0}")]
    NonPositiveScale(String),

    /// Requested dimension exceeds the desk-scale oracle guard.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// An optimizer update came out non-finite.
    #[error("non-finite update at step {step}")]
    NonFiniteUpdate { step: u64 },

    /// Eigensolver failed to converge (should not happen for finite symmetric input).
    #[error("eigensolver did not converge: {0}")]
    EigFailure(String),

    /// Invalid experiment or optimizer configuration.
    #[error("config error: {0}")]
    ConfigError(String),

    /// I/O failure while reading configs or writing telemetry.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KronoptError>;

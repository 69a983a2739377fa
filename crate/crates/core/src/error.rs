//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by fedmesh components.
#[derive(Debug, Error)]
pub enum FedError {
    /// Weight/feature dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric computation left the finite range.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file or record did not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// A fusion precondition was violated.
    #[error("fusion error: {0}")]
    Fusion(String),

    /// Configuration is missing, malformed, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An illegal protocol transition or message.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Too few live parties to proceed.
    #[error("quorum error: {0}")]
    Quorum(String),

    /// Connection-level failure (closed, reset, oversized frame).
    #[error("transport error: {0}")]
    Transport(String),

    /// A received frame could not be decoded into a valid envelope.
    #[error("decode error: {0}")]
    Decode(String),

    /// A dataset partition request cannot be satisfied.
    #[error("partition error: {0}")]
    Partition(String),
}

pub type Result<T> = std::result::Result<T, FedError>;

//! Error type shared across the pipeline.

/// Errors surfaced by pipeline operations.
#[derive(Debug, thiserror::Error)]
pub enum SvpError {
    /// An argument violated an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A numeric result left the finite range.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An enumeration or search exceeded its budget.
    #[error("resource budget exceeded: {0}")]
    Resource(String),
    /// Remote transport or conformance failure reported by a backend.
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SvpError>;

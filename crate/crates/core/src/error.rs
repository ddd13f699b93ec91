//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside a function's mathematical domain (e.g. Gamma at x <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller violated an API precondition (dimension mismatch, empty batch,
    /// infeasible partition spec, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A computation produced a non-finite value; the message names where.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file did not match its expected binary layout.
    #[error("format error: {0}")]
    Format(String),

    /// The operation is not defined for this objective kind.
    #[error("unsupported objective: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

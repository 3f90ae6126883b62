use thiserror::Error;

/// Errors raised across the post-training stack.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The input violates a precondition of the operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two configuration pieces are incompatible.
    #[error("configuration error: {0}")]
    Config(String),

    /// A recorded artifact is internally inconsistent.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A serialized artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The run configuration or command line is invalid. Nothing was written.
    #[error("config error: {0}")]
    Config(String),

    /// Another live process owns the output directory.
    #[error("output directory is locked: {0}")]
    Locked(String),

    /// An artifact belongs to a different run.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// A gradient check found a block above tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] dlpt_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(dlpt_core::Error::Config(_)) => 2,
            Self::Locked(_) | Self::Mismatch(_) => 3,
            Self::GradCheck(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A training step produced a non-finite loss or gradient. Recoverable:
    /// callers mark the run failed and carry on (PBT ranks it last).
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error("container format error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

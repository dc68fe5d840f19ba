use thiserror::Error;

/// Errors surfaced by the training engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid data fed into the model (token ids out of range, empty batches).
    #[error("invalid input: {0}")]
    Input(String),

    /// Cache and drop decisions disagree, or other inconsistent runtime state.
    #[error("inconsistent state: {0}")]
    State(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value was produced where finite math was required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

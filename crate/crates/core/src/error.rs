use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The computation graph is malformed (foreign node ids, cycles, shape mismatch).
    #[error("structural error: {0}")]
    Structural(String),

    /// A value became non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An object was used before it was ready (e.g. an unbalanced IF layer).
    #[error("invalid state: {0}")]
    State(String),

    /// Checkpoint or log contents could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

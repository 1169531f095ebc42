use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two grids that must agree (dims or spacing) do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A precondition on an argument was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where the algorithm requires a finite one.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file or document could not be parsed.
    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

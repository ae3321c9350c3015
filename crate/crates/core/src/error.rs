use thiserror::Error;

/// Errors raised by the loading engine and its drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// A function was called with arguments outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A scenario or network description cannot be run as given.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical routine produced an unusable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Internal consistency check failed (a bug, not a user error).
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

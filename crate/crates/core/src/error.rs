use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument: shape mismatch, non-finite input, bad index.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input too large for an exhaustive routine.
    #[error("size limit exceeded: {0}")]
    Size(String),

    /// Operation called on data in the wrong state (e.g. missing values).
    #[error("invalid state: {0}")]
    State(String),

    /// Configuration rejected; `key` names the offending entry.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Checkpoint format version not understood by this build.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (bad range, empty batch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor / vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The configuration is inconsistent or cannot drive the requested build.
    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized artifact is malformed (bad magic, version, checksum, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// Registry uniqueness violated (duplicate user id or fingerprint).
    #[error("conflict: {0}")]
    Conflict(String),

    /// An operation was invoked in a state where it cannot succeed (e.g. empty registry).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A numeric quantity became non-finite.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an i/o error with context (usually the path involved).
    pub fn io(context: impl std::fmt::Display, e: std::io::Error) -> Error {
        Error::Io(std::io::Error::new(e.kind(), format!("{context}: {e}")))
    }

    /// Process exit code for the CLI: 2 usage, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Shape(_)
            | Error::Format(_)
            | Error::Conflict(_)
            | Error::InvalidState(_)
            | Error::Io(_) => 3,
            Error::NonFinite(_) => 4,
        }
    }
}

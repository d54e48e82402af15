use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    /// Malformed file contents; `offset` is the byte where decoding failed.
    #[error("{what} at byte {offset}: {detail}")]
    Format { what: &'static str, offset: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] denseflow_core::error::Error),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 1 usage, 2 data or format, 3 numeric or training failure, 4 verification.
    pub fn exit_code(&self) -> i32 {
        use denseflow_core::error::Error as C;
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Config(_) => 2,
            Error::Core(C::Data(_) | C::Config(_)) => 2,
            Error::Core(_) => 3,
            Error::Verification(_) => 4,
        }
    }
}

use std::path::{Path, PathBuf};

/// Errors of the storage layer and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vitscope_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but its contents are malformed.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    /// An artifact written by an incompatible format version.
    #[error("{0}")]
    Version(String),
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Error {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 configuration, 3 numeric abort, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(vitscope_core::Error::Numeric(_)) | Error::Numeric(_) => 3,
            Error::Core(_) | Error::Config(_) | Error::Version(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

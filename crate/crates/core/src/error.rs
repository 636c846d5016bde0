use std::path::PathBuf;
use thiserror::Error;

/// Library-wide error type.
///
/// Variants are grouped by how the command-line front end reports them:
/// configuration problems exit with code 2, data problems (unreadable or
/// malformed inputs, mismatched grids, invalid arguments) with 3, and
/// numerical failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Nifti(_) | Error::GridMismatch(_) | Error::Domain(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

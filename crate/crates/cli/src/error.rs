use irap_core::image::ImageError;
use irap_core::irap::IrapError;
use thiserror::Error;

/// Failure of a CLI command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CommandError {
    /// Missing or unreadable input files.
    #[error("{0}")]
    Input(String),
    #[error("manifest has no accepted records")]
    NoAcceptedRecords,
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}: {source}")]
    Image { path: String, source: ImageError },
    #[error(transparent)]
    Manifest(#[from] IrapError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Input(_) => 2,
            CommandError::NoAcceptedRecords => 3,
            CommandError::Bind { .. } => 4,
            CommandError::Argument(_) => 64,
            _ => 1,
        }
    }
}

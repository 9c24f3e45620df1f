use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("parse error in {}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Registration(#[from] kentreg::Error),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::FileNotFound(_) => 2,
            CliError::Parse { .. } => 3,
            CliError::Registration(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Usage(_) => 64,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

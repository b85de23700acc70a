use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error(transparent)]
    Model(#[from] skt_spatial::Error),

    #[error("{failed} of {total} replicates failed")]
    Replicates { failed: usize, total: usize },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn input(path: &Path, message: impl ToString) -> Self {
        Self::Input { path: path.to_path_buf(), message: message.to_string() }
    }

    /// 1 usage or invalid input, 3 failed replicates, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 4,
            Self::Model(skt_spatial::Error::Io(_)) => 4,
            Self::Replicates { .. } => 3,
            _ => 1,
        }
    }
}

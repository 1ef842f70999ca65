use std::path::Path;

use thiserror::Error;
use winq_core::WinqError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] WinqError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("refusing unfair comparison: {0}")]
    Unfair(String),

    #[error("cannot use checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{failed} verification check(s) failed")]
    VerifyFailed { failed: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// 2 for training divergence, 3 for an unusable checkpoint, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(WinqError::Diverged { .. } | WinqError::NonFiniteGradient { .. }) => 2,
            Self::Core(WinqError::Checkpoint(_)) | Self::Checkpoint { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

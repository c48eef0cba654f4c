//! Command failures and their process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] eyecue_core::Error),

    /// Bad flags or unreadable configuration.
    #[error("{0}")]
    Usage(String),

    /// Failures that indicate a bug or a broken environment.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 1 for bad input, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(eyecue_core::Error::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                1
            }
            CliError::Core(e) if e.is_user_error() || matches!(e, eyecue_core::Error::Checkpoint(_)) => 1,
            _ => 2,
        }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(eyecue_core::Error::io(path, e))
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments or data that break a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Non-finite values entered a numeric kernel.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A token provider cannot satisfy the dense per-frame token contract.
    #[error("capability error: {0}")]
    Capability(String),

    /// The request is well formed but forbidden by the labeling or evaluation protocol.
    #[error("policy error: {0}")]
    Policy(String),

    /// A structured-text file failed schema validation.
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a bug or environment failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Policy(_)
                | Error::Schema { .. }
                | Error::Capability(_)
                | Error::Json(_)
        )
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SeatError>;

#[derive(Debug, Error)]
pub enum SeatError {
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SeatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SeatError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 IO, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SeatError::Config(_) | SeatError::Argument(_) => 1,
            SeatError::Io { .. } | SeatError::Format { .. } | SeatError::Data(_) | SeatError::Json(_) => 2,
            SeatError::Numeric(_) | SeatError::Training(_) => 3,
        }
    }
}

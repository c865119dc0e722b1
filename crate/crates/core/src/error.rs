use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error at coordinate {index}: {detail}")]
    Numeric { index: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error at row {row}, col {col}: {detail}")]
    Data {
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage/config/input-format failures, 1 for
    /// runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::Length { .. }
            | Error::Data { .. }
            | Error::Json(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Shape(_) | Error::Numeric { .. } | Error::Io { .. } => 1,
        }
    }
}

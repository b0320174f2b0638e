use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error class: 1 config/contract, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Truncated(_) | Error::Format(_) => 2,
            Error::Numeric(_) | Error::Training(_) | Error::Degenerate(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

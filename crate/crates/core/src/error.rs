use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. The CLI maps the variants onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (wrong dimensions, rank out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data.
    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// A baseline or method failed; carries the method name for context.
    #[error("method {method}: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn in_method(self, method: impl Into<String>) -> Self {
        Error::Method {
            method: method.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a configuration problem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Json(_) => true,
            Error::Method { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// True when the root cause is unreadable or malformed input data.
    pub fn is_ingestion(&self) -> bool {
        match self {
            Error::Ingestion { .. } | Error::Io { .. } => true,
            Error::Method { source, .. } => source.is_ingestion(),
            _ => false,
        }
    }
}

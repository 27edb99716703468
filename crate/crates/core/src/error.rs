use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("invalid tensor data: {0}")]
    Data(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{message}")]
    Argument {
        module: &'static str,
        message: String,
    },
    #[error("training failed: {0}")]
    Training(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn argument(module: &'static str, message: impl Into<String>) -> Self {
        Error::Argument {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the pipeline stage the error originated from.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Format(_) | Error::Data(_) | Error::Manifest(_) => "ingest",
            Error::Argument { module, .. } => module,
            Error::Training(_) => "learner",
            Error::Metric(_) => "eval",
            Error::Io { .. } => "io",
        }
    }

    /// True for errors raised while optimizing the mapping network.
    pub fn is_training(&self) -> bool {
        matches!(self, Error::Training(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

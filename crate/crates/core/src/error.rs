use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("graph error: {reason}: {name:?}")]
    Graph { name: String, reason: String },

    #[error("unsupported operator(s): {}", .0.join(", "))]
    UnsupportedOp(Vec<String>),

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("execution error in node {node:?}: {message}")]
    Execution { node: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid quantization recipe: {0}")]
    Recipe(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("cannot resume: {0}")]
    Resume(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn exec(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Execution {
            node: node.into(),
            message: message.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimator. The display string always starts
/// with the subsystem that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("dataset: {}:{line}: {msg}", file.display())]
    Load {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("so3: degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("{module}: precondition violated: {msg}")]
    Precondition { module: &'static str, msg: String },

    #[error("{module}: numerical failure: {msg}")]
    Numerical { module: &'static str, msg: String },

    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn precondition(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Precondition {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn numerical(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Numerical {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn load(file: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Load {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

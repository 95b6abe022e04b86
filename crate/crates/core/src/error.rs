use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank} in {op}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error in {source_name}: {detail}")]
    Data { source_name: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(source_name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            source_name: source_name.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Axis { .. } | Error::Shape { .. } | Error::Index { .. } => {
                ErrorKind::Config
            }
            Error::NonFiniteGradient { .. } | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Data { .. } | Error::Format(_) | Error::Io { .. } => ErrorKind::Data,
        }
    }
}

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset layout error at {path}: {msg}")]
    DatasetLayout { path: PathBuf, msg: String },

    #[error("dataset integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument `{arg}`: {msg}")]
    Argument { arg: &'static str, msg: String },

    #[error("state error: {0}")]
    State(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn argument(arg: &'static str, msg: impl Into<String>) -> Self {
        Error::Argument {
            arg,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the toolkit.
///
/// The CLI maps these onto its exit-code contract: data defects exit 1,
/// configuration problems exit 2, everything else exits 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error in {file}: {msg}")]
    Data { file: PathBuf, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("runtime error: {0}")]
    Runtime(String),

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
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(file: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            file: file.into(),
            msg: msg.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

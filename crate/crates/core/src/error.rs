use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MffError>;

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum MffError {
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
    #[error("manifest {path} line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("video {id}: {msg}")]
    Video { id: String, msg: String },
    #[error("frame {index} of {dir}: {msg}")]
    Frame {
        dir: PathBuf,
        index: usize,
        msg: String,
    },
    #[error("flow cache miss: pair ({from}, {to}) not found at {path}; run `mff flow` first")]
    CacheMiss {
        from: usize,
        to: usize,
        path: PathBuf,
    },
    #[error("invalid flow cache file {path}: {msg}")]
    CacheFormat { path: PathBuf, msg: String },
    #[error("invalid checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("config [{section}] {key}: {msg}")]
    Config {
        section: String,
        key: String,
        msg: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MffError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            MffError::Config { .. } => ErrorKind::Config,
            MffError::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MffError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(
        section: impl Into<String>,
        key: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        MffError::Config {
            section: section.into(),
            key: key.into(),
            msg: msg.into(),
        }
    }
}

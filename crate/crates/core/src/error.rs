use std::path::PathBuf;

use mff_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },

    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },

    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Error)]
pub enum SeldError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read WAV {}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, SeldError>;

impl SeldError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SeldError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SeldError::Data(msg.into())
    }
}

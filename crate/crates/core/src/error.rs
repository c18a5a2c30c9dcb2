//! Error taxonomy. Config and numeric errors map onto CLI exit codes 2 and 3;
//! shape bugs inside kernels panic with messages naming both shapes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("decode error on {path}: {what}")]
    Decode { path: String, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

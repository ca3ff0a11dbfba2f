use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a constraint.
    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("malformed configuration document: {0}")]
    ConfigDocument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite loss, gradient or activation.
    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("unknown target `{0}`")]
    UnknownTarget(String),

    #[error("input of {len} bytes exceeds the {max}-byte cap")]
    InputTooLong { len: usize, max: usize },

    #[error("undefined input: {0}")]
    Undefined(String),

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration or arguments rather than
    /// by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::UnknownKey(_)
                | Error::ConfigDocument(_)
                | Error::UnknownTarget(_)
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GidError {
    /// A caller broke an operation's precondition (shape mismatch, invalid box, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image decode error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// A dataset on disk disagrees with its manifest.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; `component` names the offending term.
    #[error("non-finite {component} loss at step {step}")]
    Diverged { component: String, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GidError {
    pub fn contract(msg: impl Into<String>) -> Self {
        GidError::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GidError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GidError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = GidError> = std::result::Result<T, E>;

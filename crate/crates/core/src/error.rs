use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    /// Several configuration fields failed validation at once.
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("non-finite gradient entry in parameter `{name}` (index {index})")]
    NonFiniteGradient { name: String, index: usize },

    #[error("training diverged on client {client} at epoch {epoch}: {detail}")]
    Divergence {
        client: usize,
        epoch: usize,
        detail: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("image is not standardizable: {0}")]
    NotStandardizable(String),

    #[error("phantom generation failed after {attempts} attempts: {reason}")]
    Degenerate { attempts: usize, reason: String },

    #[error("label value {value} outside 0..{max}")]
    UnknownLabel { value: u8, max: u8 },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

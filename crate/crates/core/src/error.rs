use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("config hash mismatch for {path}: manifest has {found}, expected {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("too many instances: {count} exceeds the configured maximum of {max}")]
    TooManyInstances { count: usize, max: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-parsable kind tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Annotation(_) => "annotation",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Checkpoint { .. } => "checkpoint",
            Error::TooManyInstances { .. } => "too_many_instances",
            Error::EmptyDataset => "empty_dataset",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Result type used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("class index {index} out of range for {class_count} classes")]
    ClassIndex { index: usize, class_count: usize },

    #[error("layer {layer}: no propagation rule assigned")]
    MissingRule { layer: usize },

    #[error("layer {layer}: rule {rule} cannot be applied to a {kind} layer")]
    RuleMismatch {
        layer: usize,
        rule: &'static str,
        kind: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unsupported layer kind {kind:?} at layer {layer}")]
    UnsupportedLayer { layer: usize, kind: String },

    #[error("model file: {0}")]
    Model(String),

    #[error("IDX file: {0}")]
    Idx(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

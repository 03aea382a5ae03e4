use std::path::PathBuf;

/// Unified error type for the whole crate.
///
/// Errors split into two classes: *validation* errors (bad configuration,
/// malformed datasets, shape mismatches — the caller asked for something
/// impossible) and *runtime* errors (I/O failures, non-finite losses — the
/// request was fine but execution failed). The CLI maps the former to exit
/// code 1 and the latter to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum EppsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dataset integrity error: {message} ({path})")]
    Dataset { message: String, path: PathBuf },

    #[error("batch too small: got {got}, mutual-information pairing needs at least 2 samples")]
    InsufficientBatch { got: usize },

    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        component: String,
        epoch: usize,
        step: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Image {
        context: String,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl EppsError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        EppsError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn image(context: impl Into<String>, source: image::ImageError) -> Self {
        EppsError::Image {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        EppsError::Json {
            context: context.into(),
            source,
        }
    }

    pub fn dataset(message: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        EppsError::Dataset {
            message: message.into(),
            path: path.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        EppsError::Config(message.into())
    }

    pub fn shape(message: impl Into<String>) -> Self {
        EppsError::Shape(message.into())
    }

    /// True for errors the caller could have prevented (bad config, bad
    /// dataset, bad shapes); false for failures that happen at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            EppsError::Config(_)
                | EppsError::Shape(_)
                | EppsError::Dataset { .. }
                | EppsError::InsufficientBatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, EppsError>;

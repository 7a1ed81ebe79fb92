use std::path::PathBuf;

use crate::model::HeadId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite values at {site}")]
    NonFinite { site: String },

    #[error("missing output head {0}")]
    MissingHead(HeadId),

    #[error("checkpoint configuration differs in fields: {}", fields.join(", "))]
    ConfigMismatch { fields: Vec<String> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("annotation: {0}")]
    Annotation(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plan: {0}")]
    Plan(String),
}

pub type Result<T> = std::result::Result<T, Error>;

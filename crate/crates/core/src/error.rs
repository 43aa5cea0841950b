use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion failed for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("could not decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("stratification infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class `{0}` has zero samples")]
    ZeroCount(String),

    #[error("non-finite activations in {layer}")]
    Numeric { layer: String },

    #[error("training diverged: non-finite loss at batch {batch} (epoch {epoch})")]
    Divergence { epoch: usize, batch: usize },

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

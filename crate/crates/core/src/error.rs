use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot decode video {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("session {session}: expected {expected} activity segments, found {count}")]
    Labeling {
        session: String,
        expected: usize,
        count: usize,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("preprocess error: {0}")]
    Preprocess(String),

    #[error("label encoding error: {0}")]
    Encoding(String),

    #[error("cannot load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Labeling { .. }
                | Error::Config(_)
                | Error::Split(_)
                | Error::Encoding(_)
                | Error::Shape(_)
                | Error::Manifest(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"GMFV\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported tensor rank {0}")]
    UnsupportedRank(u8),
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("array contains non-finite values")]
    NonFinite,
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("duplicate video_id {0:?}")]
    DuplicateVideoId(String),
    #[error("shape mismatch in {stage}: {message}")]
    Shape {
        stage: &'static str,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training data has no {0} videos")]
    MissingClass(&'static str),
    #[error("video {0:?} has no frame labels")]
    MissingFrameLabels(String),
    #[error("metric undefined: {0}")]
    Metric(&'static str),
    #[error("non-finite loss (max |weight| = {max_weight:e}, max |grad| = {max_grad:e})")]
    NonFiniteLoss { max_weight: f64, max_grad: f64 },
    #[error("top-k selection or hinge activity unstable under perturbation (gap {gap:e})")]
    UnstableSelection { gap: f64 },
    #[error("score csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            stage,
            message: message.into(),
        }
    }
}

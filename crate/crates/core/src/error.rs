use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training and inference pipeline.
#[derive(Debug, Error)]
pub enum DafError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("invalid perturbation: {0}")]
    InvalidSpec(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("empty training data")]
    EmptyData,
    #[error("too few samples: {samples} rows for {folds} folds")]
    TooFewSamples { samples: usize, folds: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid count: requested {requested} of {available}")]
    InvalidCount { requested: usize, available: usize },
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("validation subset is empty")]
    EmptyValidation,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("both classes required")]
    SingleClass,
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
}

pub type Result<T, E = DafError> = std::result::Result<T, E>;

impl DafError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DafError::Io {
            path: path.into(),
            source,
        }
    }
}

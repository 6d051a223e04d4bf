use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed Radiance header: {0}")]
    MalformedHeader(String),

    #[error("truncated scanline at row {row}")]
    TruncatedScanline { row: usize },

    #[error("corrupt run-length data at row {row}: {reason}")]
    CorruptScanline { row: usize, reason: &'static str },

    #[error("bad PFM magic {0:?}")]
    BadMagic(String),

    #[error("malformed PFM header: {0}")]
    MalformedPfmHeader(String),

    #[error("PFM payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("png error: {0}")]
    Png(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing caption feature level {level} for image {id}")]
    MissingFeatureLevel { id: String, level: usize },

    #[error("caption feature mismatch for image {id}: {reason}")]
    FeatureMismatch { id: String, reason: String },

    #[error("non-finite {term} at step {step}: {value}")]
    NonFiniteLoss { term: &'static str, step: u64, value: f64 },

    #[error("orphan {kind} file for id {id}")]
    OrphanFile { id: String, kind: &'static str },

    #[error("dimension mismatch for id {id}: hdr {hdr:?} vs ir {ir:?}")]
    PairDimMismatch {
        id: String,
        hdr: (usize, usize),
        ir: (usize, usize),
    },

    #[error("dataset is empty: {0}")]
    EmptyDataset(PathBuf),

    #[error("unmatched ids: {}", .0.join(", "))]
    UnmatchedIds(Vec<String>),

    #[error("missing backend asset: {0}")]
    MissingAsset(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}

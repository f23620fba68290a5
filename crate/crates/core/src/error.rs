use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes {found:?}, expected \"PEAD\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported bank version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },

    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("non-finite value in {what} at flat index {index}")]
    NonFiniteValue { what: &'static str, index: usize },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("reference image has no patches")]
    EmptyReference,

    #[error("prompt bank is empty")]
    EmptyPromptBank,

    #[error("batch of {0} images is too small; batch zero-shot needs at least 2")]
    BatchTooSmall(usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("expected exactly {expected} values, got {got}")]
    WrongArity { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("labels contain a single class; both classes are required")]
    SingleClass,

    #[error("labels contain no positives")]
    NoPositives,

    #[error("ground truth contains no anomalous region")]
    NoAnomalousRegion,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("oracle size guard exceeded: N*L^2 = {0} > 1e6")]
    SizeGuardExceeded(u64),

    #[error("dataset layout violation at {path}: {reason}")]
    LayoutViolation { path: PathBuf, reason: String },

    #[error("missing ground-truth mask for anomalous image {0}")]
    MissingMask(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the caller's configuration rather than by the data.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

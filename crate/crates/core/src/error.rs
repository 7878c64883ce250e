//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pgm parse error in {path}: expected magic \"P5\", found {found:?}")]
    PgmBadMagic { path: PathBuf, found: String },

    #[error("pgm parse error in {path}: {detail}")]
    PgmMalformedHeader { path: PathBuf, detail: String },

    #[error("pgm parse error in {path}: maxval {maxval} not supported (only 255)")]
    PgmUnsupportedMaxval { path: PathBuf, maxval: u64 },

    #[error("pgm parse error in {path}: raster truncated, expected {expected} bytes, found {found}")]
    PgmTruncatedRaster {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid image dimensions {width}x{height} for {len} samples")]
    BadImageShape {
        width: usize,
        height: usize,
        len: usize,
    },

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("noise sigma must be finite and >= 0, got {0}")]
    InvalidSigma(f64),

    #[error("invalid patch spec: {0}")]
    InvalidPatchSpec(String),

    #[error("image {width}x{height} smaller than one {d}x{d} patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        d: usize,
    },

    #[error("patch position ({0}, {1}) out of bounds for {2}x{3} image")]
    PositionOutOfBounds(usize, usize, usize, usize),

    #[error("nothing to aggregate and no fallback image supplied")]
    NothingToAggregate,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("invalid training config: {0}")]
    InvalidTrainingConfig(String),

    #[error("degenerate training data: {0}")]
    DegenerateTrainingData(String),

    #[error("model file {path}: {detail}")]
    ModelFormat { path: PathBuf, detail: String },

    #[error("invalid mixture model: {0}")]
    ModelValidation(String),

    #[error("model patch size {model_d}x{model_d} does not match requested patch size {requested_d}x{requested_d}")]
    ModelPatchMismatch { model_d: usize, requested_d: usize },

    #[error("invalid denoise params: {0}")]
    InvalidDenoiseParams(String),

    #[error("distribution fit needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: missing geometry property `{property}`")]
    MissingGeometryProperty { path: PathBuf, property: String },
    #[error("{path}: missing attribute property (expected red/green/blue or a scalar property)")]
    MissingAttributeProperty { path: PathBuf },
    #[error("{path}: malformed PLY header near `{property}`: {reason}")]
    MalformedHeader { path: PathBuf, property: String, reason: String },
    #[error("{path}: malformed PLY body: {reason}")]
    MalformedBody { path: PathBuf, reason: String },
    #[error("cannot write {path}: {source}")]
    UnwritablePath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("expected {expected} attribute channels, found {found}")]
    WrongChannelCount { expected: usize, found: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("target index {t} out of range for sequence of length {len}")]
    TargetOutOfRange { t: usize, len: usize },
    #[error("k = {k} exceeds support size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("empty support set")]
    EmptySupport,
    #[error("invalid patch configuration: {0}")]
    InvalidPatchConfig(String),
    #[error("point {0} is not covered by any patch")]
    UncoveredPoint(usize),
    #[error("empty reference frame")]
    EmptyReference,
    #[error("frame geometry differs across the window")]
    GeometryMismatch,
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("neighbor index {index} out of range for {n} points")]
    NeighborOutOfRange { index: usize, n: usize },
    #[error("weights are not a probability simplex: {0:?}")]
    NonSimplexWeights([f64; 3]),
    #[error("empty frame")]
    EmptyFrame,
    #[error("distortion group {0} is empty")]
    EmptyGroup(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("QP {0} is not in the configured QP set")]
    UnknownQp(i32),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("RD curve needs at least 4 points with strictly increasing rate, got {0}")]
    TooFewRdPoints(usize),
    #[error("invalid RD curve: {0}")]
    InvalidRdCurve(String),
    #[error("RD curves have no overlapping PSNR interval")]
    NoPsnrOverlap,
    #[error("malformed CSV {path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

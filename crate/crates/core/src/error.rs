use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{modality} stream must have {expected} channels, found {found}")]
    ChannelCountMismatch {
        modality: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at frame {frame}, channel {channel}")]
    NonFiniteValue { frame: usize, channel: usize },

    #[error("segment too short: {frames} frames, need at least {required}")]
    SegmentTooShort { frames: usize, required: usize },

    #[error("zero-variance channel {channel} (delay offset {offset} frames)")]
    ZeroVarianceChannel { channel: usize, offset: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge within {0} sweeps")]
    NoConvergence(usize),

    #[error("no spectra carry label {0}")]
    EmptyGroup(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid dropout rate {0}")]
    InvalidRate(f64),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("need at least 3 subjects for leave-one-subject-out, found {0}")]
    InsufficientSubjects(usize),

    #[error("cohort contains a single class")]
    SingleClassCohort,

    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("every grid-search cell failed")]
    GridExhausted,

    #[error("zero variance")]
    ZeroVariance,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

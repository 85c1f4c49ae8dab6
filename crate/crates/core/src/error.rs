use thiserror::Error;

use crate::mae::ModelState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid shape in {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate sample at index {index}: zero norm")]
    DegenerateSample { index: usize },

    #[error("degenerate distances: {0}")]
    DegenerateDistances(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated input while reading {0}")]
    Truncated(&'static str),

    #[error("shape overflow: {0}")]
    ShapeOverflow(String),

    #[error("infeasible model config: {0}")]
    InfeasibleConfig(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    /// Carries the last model whose loss was still finite.
    #[error("adaptation diverged at step {step}")]
    AdaptationDiverged { step: usize, last_finite: Box<ModelState> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::InvalidState(_) => "invalid_state",
            Error::DegenerateSample { .. } => "degenerate_sample",
            Error::DegenerateDistances(_) => "degenerate_distances",
            Error::DegenerateData(_) => "degenerate_data",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::ShapeOverflow(_) => "shape_overflow",
            Error::InfeasibleConfig(_) => "infeasible_config",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::AdaptationDiverged { .. } => "adaptation_diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidShape { op, detail: detail.into() }
    }
}

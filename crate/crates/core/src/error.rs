//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CalmError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalmError {
    #[error("cannot normalize a vector with norm {norm:e}")]
    ZeroVector { norm: f64 },

    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid embedding set: {0}")]
    InvalidEmbeddingSet(String),

    #[error("only one class present; negative pairs need at least two")]
    SingleClass,

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("insufficient pairs for {owner}: {positives} positive, {negatives} negative")]
    InsufficientPairs {
        owner: String,
        positives: usize,
        negatives: usize,
    },

    #[error("degenerate calibration range: d_min = {d_min} >= d_max = {d_max}")]
    DegenerateRange { d_min: f64, d_max: f64 },

    #[error("utility curves are not sampled on the same grid")]
    GridMismatch,

    #[error("epsilon = {epsilon} selects no class out of {classes}")]
    EmptyGroup { epsilon: f64, classes: usize },

    #[error("no valid (anchor, positive, negative) triplet in batch")]
    NoValidTriplets,

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("mean resultant length {r_bar} is too close to 1 for a finite concentration")]
    Degenerate { r_bar: f64 },

    #[error("invalid concentration bounds: kappa_min = {kappa_min}, kappa_max = {kappa_max}")]
    InvalidBounds { kappa_min: f64, kappa_max: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("class {class} has {count} samples this epoch, need at least 2")]
    InsufficientSamples { class: u32, count: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl CalmError {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            CalmError::ZeroVector { .. } => "ZeroVector",
            CalmError::OutOfRange { .. } => "OutOfRange",
            CalmError::DimensionMismatch { .. } => "DimensionMismatch",
            CalmError::InvalidEmbeddingSet(_) => "InvalidEmbeddingSet",
            CalmError::SingleClass => "SingleClass",
            CalmError::IndexOutOfRange { .. } => "IndexOutOfRange",
            CalmError::InsufficientPairs { .. } => "InsufficientPairs",
            CalmError::DegenerateRange { .. } => "DegenerateRange",
            CalmError::GridMismatch => "GridMismatch",
            CalmError::EmptyGroup { .. } => "EmptyGroup",
            CalmError::NoValidTriplets => "NoValidTriplets",
            CalmError::ShapeMismatch { .. } => "ShapeMismatch",
            CalmError::Degenerate { .. } => "Degenerate",
            CalmError::InvalidBounds { .. } => "InvalidBounds",
            CalmError::EmptyInput(_) => "EmptyInput",
            CalmError::InsufficientSamples { .. } => "InsufficientSamples",
            CalmError::NonFiniteLoss { .. } => "NonFiniteLoss",
            CalmError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

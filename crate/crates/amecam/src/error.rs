//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("volume contains non-finite voxels")]
    NonFiniteVoxels,

    #[error("bad dimensions: {0}")]
    BadDimensions(String),

    #[error("empty case list")]
    EmptyCaseList,

    #[error("{got} case(s) cannot populate {needed} non-empty splits")]
    TooFewCases { got: usize, needed: usize },

    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),

    #[error("sample has no ground-truth mask")]
    MissingMask,

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),

    #[error("channel mismatch: features have {features} channels, head expects {head}")]
    ChannelMismatch { features: usize, head: usize },

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("bad upsample target: native {native:?}, target {target:?}")]
    BadTargetSize {
        native: (usize, usize),
        target: (usize, usize),
    },

    #[error("empty map list")]
    EmptyList,

    #[error("activation maps have mixed resolutions")]
    MixedResolutions,

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("resolution mismatch: image {image:?}, maps {maps:?}")]
    ResolutionMismatch {
        image: (usize, usize),
        maps: (usize, usize),
    },

    #[error("contrastive batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("anchor {0} has no positive pair")]
    NoPositivePair(usize),

    #[error("embedding {index} is not L2-normalized (|norm - 1| = {deviation:e})")]
    UnnormalizedEmbedding { index: usize, deviation: f64 },

    #[error("bad scheduler step {step} for horizon {total}")]
    BadStep { step: usize, total: usize },

    #[error("sampler infeasible: class {class} has only {count} sample(s)")]
    SamplerInfeasible { class: u8, count: usize },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),

    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,

    #[error("{0} mask is empty")]
    EmptyMask(&'static str),

    #[error("no evaluable samples")]
    NoEvaluableSamples,

    #[error("cannot write {0}")]
    UnwritablePath(PathBuf),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("degenerate cloud: bounding box has zero extent")]
    DegenerateCloud,
    #[error("empty cloud")]
    EmptyCloud,
    #[error("empty crop around {center:?} with radius {radius}")]
    EmptyCrop { center: [f64; 3], radius: f64 },
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("pair rejected: {0}")]
    PairRejected(String),
    #[error("generation failed at scene {index}: {reason}")]
    Generation { index: usize, reason: String },
    #[error("no placements available")]
    NoPlacements,
    #[error("non-finite refiner output at step {step}")]
    NonFiniteStep { step: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: String },
    #[error("loss became NaN at iteration {iteration} (batch fingerprint {fingerprint:016x})")]
    NanLoss { iteration: usize, fingerprint: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

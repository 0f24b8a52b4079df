use crate::world::Pose;
use thiserror::Error;

/// Errors raised across the pipeline. In-band simulator failures are not
/// errors; they are reported through [`crate::world::StepResult`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("goal condition references {0} which is not present in the scene")]
    UnknownGoalTarget(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("replay failed at step {step}: {reason}")]
    Replay { step: usize, reason: String },

    #[error("no path from {from:?} to {to:?}")]
    NoPath { from: Pose, to: Pose },

    #[error("path does not start at current pose {current:?}")]
    PathMismatch { current: Pose },

    #[error("pose {0:?} is not in the offline store")]
    EnvMiss(Pose),

    #[error("malformed store file: {0}")]
    StoreFormat(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("unknown token: {0}")]
    UnknownToken(String),

    #[error("token id {0} out of vocabulary")]
    TokenId(u32),

    #[error("malformed detection box {0:?}")]
    MalformedBox([f64; 4]),

    #[error("backward already run on this tape")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("sgd step without populated gradients")]
    MissingGrads,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid box state: {0}")]
    InvalidState(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("pair {index} is not aligned: rgb {rgb:?} vs tir {tir:?}")]
    Alignment {
        index: usize,
        rgb: (u32, u32),
        tir: (u32, u32),
    },

    #[error("crop error: {0}")]
    Crop(String),

    #[error("strategy `{strategy}` unavailable: {reason}")]
    StrategyUnavailable {
        strategy: &'static str,
        reason: String,
    },

    #[error("batch layout error: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown setting `{0}`")]
    UnknownSetting(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("architecture mismatch: expected `{expected}`, found `{found}`")]
    Descriptor { expected: String, found: String },

    #[error("training failed after {} epochs (last loss {:?})", .trace.len(), .trace.last())]
    TrainingFailed { trace: Vec<f64> },

    #[error("training aborted at epoch {epoch} step {step}: non-finite loss")]
    TrainingAborted {
        epoch: usize,
        step: usize,
        snapshot: Box<crate::trainer::TrainState>,
    },

    #[error("upstream run failed: {0}")]
    Upstream(String),

    #[error("tracker init: {0}")]
    Init(String),

    #[error("length mismatch: {0} predictions vs {1} ground-truth boxes")]
    LengthMismatch(usize, usize),

    #[error("missing threshold {0} in curve")]
    MissingThreshold(f64),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

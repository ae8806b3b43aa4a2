use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("numeric domain violation in {op} at flat index {index}: {msg}")]
    NumericDomain {
        op: &'static str,
        index: usize,
        msg: String,
    },

    #[error("tensors belong to different tapes in {op}")]
    TapeMismatch { op: &'static str },

    #[error("byte stream truncated at offset {offset}: {msg}")]
    Truncated { offset: usize, msg: String },

    #[error("parse error at point {index}: {msg}")]
    Parse { index: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("point index {index} has no voxel mapping")]
    UnmappedPoint { index: usize },

    #[error("degenerate attention: context row set is fully masked")]
    DegenerateAttention,

    #[error("non-finite value in parameter {name} during {stage}")]
    Divergence { name: String, stage: &'static str },

    #[error("function is not deterministic under a fixed seed: {0}")]
    Determinism(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

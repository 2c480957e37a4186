//! Crate-wide error type.

use crate::model::BlockId;

/// Errors produced by any layer of the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A class label outside `[0, n_classes)`.
    #[error("label {label} out of range for {n_classes} classes")]
    IndexOutOfRange { label: usize, n_classes: usize },

    /// A value id that does not belong to the tape, or a non-scalar loss.
    #[error("tape error: {0}")]
    Tape(String),

    /// Invalid block id or a parameter vector of the wrong length.
    #[error("block error: {0}")]
    Block(String),

    /// Invalid model or task dimensions.
    #[error("spec error: {0}")]
    Spec(String),

    /// Empty or inconsistent data passed to a data-dependent operation.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid a-b-c modality configuration.
    #[error("modality config error: {0}")]
    ModalityConfig(String),

    /// A client with an empty shard signals that it must be skipped.
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },

    /// Experiment configuration rejected, with the offending field path.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    /// A violation of the round protocol (missing update, bad plan).
    #[error("protocol error (round {round}): {detail}")]
    Protocol { round: usize, detail: String },

    /// Gains are undefined when the reference score is not positive.
    #[error("undefined gain: S_FM = {s_fm} must be positive")]
    UndefinedGain { s_fm: f64 },

    /// Checkpoint or dataset file could not be read or parsed.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn block_len(id: BlockId, expected: usize, got: usize) -> Self {
        Error::Block(format!("{id}: expected {expected} parameters, got {got}"))
    }

    /// Exit code for the CLI: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

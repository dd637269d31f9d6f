use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("degenerate vector")]
    DegenerateVector,

    #[error("degenerate feature")]
    DegenerateFeature,

    #[error("non-finite objective")]
    NonFiniteObjective,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("prompt length mismatch: expected {expected} rows, got {actual}")]
    PromptLengthMismatch { expected: usize, actual: usize },

    #[error("no patches")]
    NoPatches,

    #[error("class id {id} out of range for {count} classes")]
    ClassOutOfRange { id: usize, count: usize },

    #[error("forward not run")]
    ForwardNotRun,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("non-finite loss at step {step} (lr = {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("bad magic")]
    BadMagic,

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("record length mismatch: expected {expected} bytes per record, found {found}")]
    RecordLengthMismatch { expected: usize, found: usize },

    #[error("inconsistent dimensions: {0}")]
    DimInconsistent(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

use thiserror::Error;

/// Unified error type for the core pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty reduction in {op}")]
    EmptyReduction { op: &'static str },

    #[error("train-mode batchnorm needs a batch of at least 2 rows, got {n}")]
    InsufficientBatch { n: usize },

    #[error("backward already run on this graph; call reset_grads first")]
    BackwardAlreadyRun,

    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },

    #[error("cross-attention context is empty")]
    EmptyContext,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown word: {0}")]
    UnknownWord(String),

    #[error("duplicate word: {0}")]
    DuplicateWord(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint schema error: missing tensor {0}")]
    CheckpointSchema(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("decode error: non-finite regression values at cell {cell}")]
    DecodeNonFinite { cell: usize },

    #[error("scene too crowded: gave up placing a box after {attempts} attempts")]
    Overcrowded { attempts: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

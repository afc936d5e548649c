use std::io;

use thiserror::Error;

/// Errors raised anywhere in the captioning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("no valid positions")]
    NoValidPositions,
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("empty conditioning")]
    EmptyConditioning,
    #[error("step {step} out of range {min}..={max}")]
    StepOutOfRange { step: usize, min: usize, max: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed wav: {0}")]
    Wav(String),
    #[error("bad checkpoint magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported checkpoint version: expected {expected}, found {found}")]
    BadVersion { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("idf undefined: corpus needs at least 2 items, got {0}")]
    IdfUndefined(usize),
    #[error("batch {index}: {source}")]
    Batch { index: usize, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

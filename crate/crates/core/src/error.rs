use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("distraction factor {0} is outside [0, 1]")]
    InvalidFactor(f64),
    #[error("distraction factor increment must be non-negative, got {0}")]
    NegativeDelta(f64),
    #[error("attention row has an empty context axis")]
    EmptyContext,
    #[error("label {0} is not a valid candidate index")]
    InvalidLabel(usize),
    #[error("sequence already carries a CLS slot")]
    DoubleCls,
    #[error("cannot reconcile {anchor} anchor rows with {tail} tail rows")]
    IrreconcilableRows { anchor: usize, tail: usize },
    #[error("sequence of {len} positions exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("token must be non-empty")]
    EmptyToken,
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while decoding binary feature or checkpoint files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed record: {0}")]
    Malformed(String),
}

impl FormatError {
    /// Stable numeric code for each failure kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::VersionMismatch { .. } => 2,
            FormatError::CrcMismatch { .. } => 3,
            FormatError::Truncated { .. } => 4,
            FormatError::Malformed(_) => 5,
        }
    }
}

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid graph node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),
    #[error("incomplete error table for `{kind}`: missing severity {severity}")]
    IncompleteErrorTable { kind: String, severity: u8 },
    #[error("baseline error sum is zero for `{0}`")]
    ZeroBaseline(String),
    #[error("empty error table")]
    EmptyErrorTable,
    #[error("encoder mismatch: checkpoint uses {checkpoint}, requested {requested}")]
    EncoderMismatch {
        checkpoint: String,
        requested: String,
    },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u16, got: u16 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error("image format error: {0}")]
    ImageFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

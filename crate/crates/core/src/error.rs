use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("not a PVP {expected} file (bad magic bytes)")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("integrity error: crc32 mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("incompatible module bank: {0}")]
    Incompatible(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Incompatible(_) => ErrorKind::Config,
            Error::NonFiniteLoss { .. } => ErrorKind::Numerical,
            Error::ShapeMismatch { .. }
            | Error::NonScalarLoss(_)
            | Error::LabelOutOfRange { .. }
            | Error::MissingGrad(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Parse { .. }
            | Error::Crc { .. }
            | Error::Data(_)
            | Error::Io(_) => ErrorKind::Data,
        }
    }
}

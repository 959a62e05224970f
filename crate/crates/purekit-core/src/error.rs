use alloc::string::String;
use core::fmt;

use crate::codec::CodecError;

/// Error type shared by every operation in the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An image had a different (C, H, W) than the operation required.
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    /// A flat buffer length disagreed with its declared shape.
    DataLength { expected: usize, actual: usize },
    /// An operation that needs at least one element got none.
    EmptyInput(&'static str),
    /// A class label outside `[0, classes)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// An architecture description that cannot be evaluated on the given input.
    BadSpec(String),
    /// A non-finite value surfaced mid-computation; `step` is the iteration
    /// index at which it appeared.
    NonFinite { context: &'static str, step: u64 },
    /// EBM training tripped the divergence guard.
    Diverged { step: u64, gap: f32 },
    /// The Benettin perturbation collapsed to exactly zero.
    DegenerateCoupling { step: u64 },
    /// A purification chain failed; `index` is the dataset position.
    ChainFailed { index: usize, step: u64 },
    /// A poison spec that cannot be realized on the given dataset.
    InfeasiblePoison(String),
    /// A malformed checkpoint or dataset payload.
    Codec(CodecError),
    /// A training observer declined to continue (a checkpoint could not be
    /// written, say).
    Aborted { step: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, actual } => write!(
                f,
                "shape mismatch: expected {}x{}x{}, got {}x{}x{}",
                expected.0, expected.1, expected.2, actual.0, actual.1, actual.2
            ),
            Error::DataLength { expected, actual } => {
                write!(f, "data length {actual} does not match shape ({expected} values)")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::BadSpec(msg) => write!(f, "invalid network spec: {msg}"),
            Error::NonFinite { context, step } => {
                write!(f, "non-finite value in {context} at step {step}")
            }
            Error::Diverged { step, gap } => {
                write!(f, "training diverged at step {step}: energy gap {gap}")
            }
            Error::DegenerateCoupling { step } => {
                write!(f, "perturbation collapsed to zero at step {step} (degenerate coupling)")
            }
            Error::ChainFailed { index, step } => {
                write!(f, "purification chain {index} failed at step {step}")
            }
            Error::InfeasiblePoison(msg) => write!(f, "infeasible poison spec: {msg}"),
            Error::Codec(e) => write!(f, "codec error: {e}"),
            Error::Aborted { step } => write!(f, "run aborted by observer at step {step}"),
        }
    }
}

impl From<CodecError> for Error {
    fn from(e: CodecError) -> Self {
        Error::Codec(e)
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Codec(e) => Some(e),
            _ => None,
        }
    }
}

use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or argument shapes disagree.
    Shape(String),
    /// Fewer points than an operation needs.
    InsufficientPoints {
        needed: usize,
        available: usize,
    },
    EmptyInput(&'static str),
    /// NaN or infinity in an input or activation.
    NonFinite(String),
    /// A training step produced a non-finite loss.
    NonFiniteLoss {
        step: usize,
    },
    InvalidArgument(String),
    UnknownAugmentation(String),
    /// A checkpoint shares no tensor with the target model.
    IncompatibleCheckpoint,
    /// Strict transfer found a tensor that could not be installed.
    TransferMismatch {
        name: String,
        reason: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InsufficientPoints { needed, available } => {
                write!(f, "insufficient points: need {needed}, have {available}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::UnknownAugmentation(name) => write!(f, "unknown augmentation '{name}'"),
            Error::IncompatibleCheckpoint => {
                write!(f, "incompatible checkpoint: no tensor matched the target")
            }
            Error::TransferMismatch { name, reason } => {
                write!(f, "transfer of '{name}' failed: {reason}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;

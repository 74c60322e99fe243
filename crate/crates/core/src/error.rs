use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    Shape { op: &'static str, detail: String },
    /// A scalar argument is outside its valid range.
    InvalidArgument { name: &'static str, detail: String },
    /// Not enough items to perform the operation (e.g. fewer than two pairs).
    TooFew { what: &'static str, needed: usize, got: usize },
    /// The configured loss family does not match the network variant.
    VariantMismatch { expected: &'static str, found: &'static str },
    /// A non-finite loss was produced during training.
    Diverged { epoch: usize, batch: usize },
    /// A node of the tape was used in a way the tape does not support.
    Tape(String),
    /// Two sizes that must agree do not.
    DimensionMismatch { what: &'static str, left: Vec<usize>, right: Vec<usize> },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { name, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            Error::InvalidArgument { name, detail } => write!(f, "invalid {name}: {detail}"),
            Error::TooFew { what, needed, got } => {
                write!(f, "{what}: need at least {needed}, got {got}")
            }
            Error::VariantMismatch { expected, found } => {
                write!(f, "variant mismatch: expected {expected}, found {found}")
            }
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
            }
            Error::Tape(msg) => write!(f, "tape: {msg}"),
            Error::DimensionMismatch { what, left, right } => {
                write!(f, "{what}: dimensions {left:?} and {right:?} differ")
            }
        }
    }
}

impl core::error::Error for Error {}

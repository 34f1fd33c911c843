//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    ShapeMismatch(String),
    /// log/sqrt/div evaluated on an out-of-domain value.
    Domain(&'static str),
    /// `grad` was asked for a non-scalar output.
    NotScalar,
    /// A `Var` from a different (or dropped) trace was passed in.
    TraceMismatch,
    /// Configuration or layer specification is invalid.
    InvalidSpec(String),
    /// A label lies outside `[0, classes)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// A partition, batch, or dataset request cannot be satisfied.
    Infeasible(String),
    /// A quantity became undefined (e.g. correlation of a constant series).
    Degenerate(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NotScalar => write!(f, "gradient output must be a scalar"),
            Error::TraceMismatch => write!(f, "tensor does not belong to this trace"),
            Error::InvalidSpec(msg) => write!(f, "invalid specification: {msg}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::Infeasible(msg) => write!(f, "infeasible request: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn spec(msg: impl Into<String>) -> Self {
        Error::InvalidSpec(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}

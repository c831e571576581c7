//! Shared error type for the core library.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Array shapes incompatible with the requested operation.
    Shape(String),
    /// Invalid argument or state (bad hyperparameter, non-scalar backward
    /// root, unknown parameter name, ...).
    Invalid(String),
    /// Numerical failure: non-finite values, infeasible filter design,
    /// NaN loss during training.
    Numeric(String),
    /// A required electrode is missing from a recording.
    MissingElectrode(String),
    /// Inconsistent or insufficient data (length mismatches, single-class
    /// metric inputs, too few subjects for a split, ...).
    Data(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::MissingElectrode(m) => write!(f, "missing electrode: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

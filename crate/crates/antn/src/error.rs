//! Error types shared across the crate.
//!
//! Two broad families cover everything the library can reject:
//! [`ConfigError`] for requests that are malformed before any data is
//! touched (bad shapes, out-of-range parameters, inconsistent options) and
//! [`DataError`] for inputs whose contents are invalid (labels out of range,
//! non-finite values, mismatched field sizes). The codecs in [`crate::io`]
//! define their own, more specific types and convert into these where the
//! distinction stops mattering.

use thiserror::Error;

/// A request was malformed before any data was examined.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// A tensor or field did not have the shape an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A scalar parameter was outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Two options that must agree did not.
    #[error("inconsistent options: {0}")]
    Inconsistent(String),
}

/// Input data had invalid contents.
#[derive(Debug, Error)]
pub enum DataError {
    /// A label value was outside `0..num_classes`.
    #[error("label {value} out of range for {num_classes} classes{}", at.as_deref().unwrap_or(""))]
    LabelRange {
        value: u32,
        num_classes: usize,
        /// Optional " at ..." suffix locating the offender.
        at: Option<String>,
    },
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Two pieces of data that must share a shape did not.
    #[error("data shape mismatch: {0}")]
    Shape(String),
    /// The input was valid but degenerate, leaving the quantity undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Anything a training run can reject; a union of the two families above.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
}

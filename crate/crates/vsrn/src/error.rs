//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A tensor id was used with a record that did not produce it.
    #[error("tensor does not belong to this computation record")]
    Provenance,

    /// A function that must be deterministic returned differing values.
    #[error("non-deterministic function: {0}")]
    Determinism(String),

    /// An argument is outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A region ordering is not a valid permutation.
    #[error("invalid ordering: {0}")]
    Ordering(String),

    /// Malformed input data (empty caption, bad token id, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A documented contract was violated by the caller or by training.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file could not be parsed.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized file has the wrong magic, version, or layout.
    #[error("format error: {0}")]
    Format(String),

    /// A serialized file failed its integrity check.
    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

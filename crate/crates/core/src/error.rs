//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between two operands.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument is outside its allowed range (e.g. temperature <= 0).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Input data fails a documented precondition (e.g. non-stochastic rows).
    #[error("validation failed: {0}")]
    Validation(String),

    /// An API contract was violated (non-scalar backward root, detached head, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter designated frozen would have been (or was) touched.
    #[error("freeze contract violated: {0}")]
    Freeze(String),

    /// An index (token id, label, layer) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Bad or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A required artifact is missing or incompatible with the request.
    #[error("artifact error: {0}")]
    Artifact(String),

    /// Runs handed to the comparison harness do not line up.
    #[error("comparison mismatch: {0}")]
    Compare(String),

    /// The operation is defined but not supported for these inputs
    /// (e.g. student init from a teacher of a different width).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Malformed checkpoint container.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

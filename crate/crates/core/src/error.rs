// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum ForgeError {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// A kernel produced NaN or infinity.
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A token id is outside the vocabulary.
    #[error("unknown token id {0}")]
    UnknownToken(usize),

    /// Two interventions target the same component.
    #[error("conflicting interventions on {0}")]
    ConflictingIntervention(String),

    /// Training loss became non-finite. The last good checkpoint step is kept.
    #[error("training diverged at step {step} (last good checkpoint at step {last_good_step})")]
    Diverged { step: usize, last_good_step: usize },

    /// Malformed input file contents.
    #[error("parse error in {source_name}: {detail}")]
    Parse { source_name: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Shorthand result type.
pub type Result<T> = std::result::Result<T, ForgeError>;

pub(crate) fn invalid(msg: impl Into<String>) -> ForgeError {
    ForgeError::InvalidArgument(msg.into())
}

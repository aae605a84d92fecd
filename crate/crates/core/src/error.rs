// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors produced by the analysis engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value violates a documented invariant. `field` names the offending
    /// input so callers can surface it directly.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("manifest not found in {}", .0.display())]
    ManifestNotFound(PathBuf),

    #[error("tensor file not found: {}", .0.display())]
    TensorNotFound(PathBuf),

    #[error("tensor length mismatch: expected {expected} bytes, found {found}")]
    TensorLengthMismatch { expected: u64, found: u64 },

    #[error("non-finite activation at ({sample}, {head}, {dim})")]
    NonFiniteActivation {
        sample: usize,
        head: usize,
        dim: usize,
    },

    #[error("token {token} out of vocabulary (size {vocab_size})")]
    TokenOutOfVocab { token: u32, vocab_size: usize },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("uninformative pair: |p_clean - p_corrupted| = {gap:e} below {epsilon:e}")]
    UninformativePair { gap: f64, epsilon: f64 },

    #[error("all {0} prompt pairs are uninformative")]
    AllPairsUninformative(usize),

    #[error("labels contain a single class")]
    SingleClass,

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {what}: {left} vs {right}")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("angle {angle} at qubit {qubit} outside [-1, 1]")]
    AngleOutOfRange { qubit: usize, angle: f64 },

    #[error("requested {requested} prompt pairs but only {capacity} distinct pairs exist")]
    PromptCapacity { requested: usize, capacity: usize },

    #[error("undefined correlation: {0} is constant")]
    UndefinedCorrelation(&'static str),

    #[error("both samples have zero variance")]
    ZeroVariance,

    #[error("{0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::ManifestNotFound(_)
                | Error::TensorNotFound(_)
                | Error::TensorLengthMismatch { .. }
                | Error::NonFiniteActivation { .. }
                | Error::TokenOutOfVocab { .. }
                | Error::IndexOutOfRange { .. }
                | Error::AngleOutOfRange { .. }
                | Error::PromptCapacity { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

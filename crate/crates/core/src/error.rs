//! Error taxonomy shared across the crate.
//!
//! Variants are grouped the way the CLI maps them to exit codes: anything
//! about inputs on disk or run configuration is a data problem, anything
//! about arithmetic blowing up mid-computation is a numeric problem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RhymeError {
    /// An argument violates a documented precondition (non-finite value,
    /// out-of-range scalar, bad shape pairing).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A point lies outside the domain of a manifold map.
    #[error("domain error: {0}")]
    Domain(String),

    /// An input with norm below the degeneracy threshold where the
    /// requested map has no defined direction.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Tensor dimensions disagree with the model configuration.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value appeared inside a computation. `stage` names the
    /// pipeline step that produced it.
    #[error("numeric error at stage `{stage}`: {message}")]
    Numeric { stage: String, message: String },

    /// A binary file failed structural validation. `offset` is the byte
    /// position at which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A manifest line failed to parse or validate. `line` is 1-based.
    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    /// A run configuration is unusable (empty selection, single-class
    /// training set, inconsistent dimensions between artifacts).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RhymeError>;

impl RhymeError {
    pub fn numeric(stage: &str, message: impl Into<String>) -> Self {
        RhymeError::Numeric {
            stage: stage.to_string(),
            message: message.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        RhymeError::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors that indicate broken arithmetic rather than bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, RhymeError::Numeric { .. })
    }
}

//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the requested operation.
    #[error("dimension mismatch in {op}: left shape {lhs:?}, right shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A class index or buffer index out of its valid range.
    #[error("index out of range in {context}: got {index}, limit {limit}")]
    Index {
        context: &'static str,
        index: usize,
        limit: usize,
    },

    /// A caller violated an operation's contract.
    #[error("contract violation in {context}: {message}")]
    Contract {
        context: &'static str,
        message: String,
    },

    /// Invalid configuration (ranks, ratios, plan geometry, config files).
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss in {pathway} update at epoch {epoch}, batch {batch}")]
    Training {
        pathway: &'static str,
        epoch: usize,
        batch: usize,
    },

    /// Checkpoint or report file format problems.
    #[error("format error: {0}")]
    Format(String),

    /// A protocol-level invariant (forgetting bound, determinism) failed.
    #[error("protocol invariant violated: {0}")]
    InvariantViolation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(context: &'static str, message: impl Into<String>) -> Self {
        Error::Contract {
            context,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

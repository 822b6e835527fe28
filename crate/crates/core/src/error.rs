use thiserror::Error;

/// Errors raised by the reward, decoding, optimisation and theory routines.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical precondition (empty sentence, zero vector, bad λ, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract, e.g. expanding a finished beam.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Decoding could not continue because the policy offered no usable token.
    #[error("generation failed for {beam}: {reason}")]
    Generation { beam: String, reason: String },

    /// Every prompt in an iteration produced a tie or identical responses.
    #[error("iteration {iteration}: no preference signal ({skipped} prompts skipped, {ties} ties)")]
    NoSignal {
        iteration: usize,
        skipped: usize,
        ties: usize,
    },

    /// The DPO loss became NaN or infinite.
    #[error("non-finite loss at step {step} (pair index {pair})")]
    NonFinite { step: usize, pair: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

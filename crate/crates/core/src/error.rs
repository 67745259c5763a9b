use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Shapes, channel counts or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation needs state that has not been established yet.
    #[error("state error: {0}")]
    State(String),
    /// Malformed input values.
    #[error("input error: {0}")]
    Input(String),
    /// API misuse, such as calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("no text anchor for word `{0}`")]
    MissingAnchor(String),
    /// `silence` never has a text anchor; asking for one is a caller bug.
    #[error("contract violation: the `silence` class has no text anchor")]
    SilenceAnchor,
    #[error("invalid anchor set: {0}")]
    Anchor(String),
    #[error("triplet sampling failed: {0}")]
    Sampling(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged in stage {stage} at epoch {epoch}: {detail}")]
    Diverged { stage: u8, epoch: usize, detail: String },
    #[error("dataset error: {0}")]
    Dataset(String),
}

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory has no turns")]
    EmptyTrajectory,

    #[error("turn {0} has no tokens")]
    EmptyTurn(usize),

    #[error("invalid log-probability {value} at turn {turn}: must be finite and <= 0")]
    InvalidLogprob { turn: usize, value: f64 },

    #[error("turn {0} carries an observation without a tool call")]
    ObservationWithoutToolCall(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty sequence where at least one element is required")]
    EmptySequence,

    #[error("action {action} out of range for vocabulary of size {vocab}")]
    ActionOutOfRange { action: u32, vocab: usize },

    #[error("invalid policy parameters: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),

    #[error("unknown environment instance {0}")]
    UnknownInstance(u64),

    #[error("environment instance {0} is terminated; reset before stepping")]
    Terminated(u64),

    #[error("environment does not guarantee deterministic replay")]
    NondeterministicEnv,

    #[error("prefix replay diverged from the recorded trajectory: {0}")]
    ReplayDiverged(String),

    #[error("prefix/suffix boundary mismatch: {0}")]
    PrefixMismatch(String),

    #[error("chunk segmentation does not match the trajectory: {0}")]
    BadSegmentation(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

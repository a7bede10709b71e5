//! Desk-scale agentic reinforcement-learning stack over explicit softmax
//! policies and simulated multi-turn tool environments.
//!
//! The crate provides:
//! - a trajectory/chunk data model with dual (sampler/trainer) token
//!   log-probabilities ([`trajectory`]);
//! - linear-softmax toy policies with exact gradients and a perturbed sampler
//!   variant emulating inference/training engine mismatch ([`policy`]);
//! - the dynamically masked supervised fine-tuning objective ([`sft`]);
//! - off-policy REINFORCE baselines and chunk-level policy optimization with
//!   geometric-mean truncated importance sampling ([`objectives`]);
//! - expert-prefix resampling: crucial-fork detection, sequential rollback,
//!   and parallelized initialization ([`resampler`]);
//! - deterministic toy tool environments behind a make/reset/step/close
//!   lifecycle ([`env`]) and a line-delimited wire protocol ([`protocol`]);
//! - a discrete-event simulation of asynchronous training with per-sample
//!   staleness bounds and train-rollout GPU multiplexing ([`scheduler`]);
//! - pass-rate-based difficulty curation of training instances ([`curator`]).

pub mod curator;
pub mod env;
pub mod error;
pub mod objectives;
pub mod policy;
pub mod protocol;
pub mod resampler;
pub mod rollout;
pub mod scheduler;
pub mod sft;
pub mod trajectory;

pub use env::{EnvRegistry, EnvSpec, Environment, NoiseMode, SimEnv, StepOutcome};
pub use error::{Error, Result};
pub use objectives::RlConfig;
pub use policy::{SamplerVariant, ToyPolicy};
pub use rollout::{Episode, RolloutConfig};
pub use trajectory::{segment_into_chunks, Chunk, FilteredReason, Token, Trajectory, Turn};

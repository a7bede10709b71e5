//! Trajectory data model: tokens with dual log-probabilities, turns, terminal
//! rewards, and the segmentation of token sequences into interaction chunks.
//!
//! A chunk is a contiguous token span ending at an environment interaction
//! (a tool-calling turn) or at task completion. Chunk spans partition the
//! flattened token sequence exactly, which is what makes chunk-level returns
//! and importance ratios well defined.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled action token with the log-probabilities recorded at rollout
/// time under the three policies involved in off-policy training: the live
/// trainer, the trainer snapshot that was current when the sample was
/// generated, and the sampling engine's (possibly mismatched) policy.
///
/// Log-probabilities are stored rather than recomputed so that every
/// importance ratio is a pure function of the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Token {
    /// Action-vocabulary index.
    pub id: u32,
    /// log-probability under the current trainer policy, nats.
    pub trainer_logprob: f64,
    /// log-probability under the trainer policy at generation time, nats.
    pub trainer_old_logprob: f64,
    /// log-probability under the sampling engine's policy, nats.
    pub sampler_logprob: f64,
}

impl Token {
    pub fn new(id: u32, trainer_logprob: f64, trainer_old_logprob: f64, sampler_logprob: f64) -> Self {
        Token { id, trainer_logprob, trainer_old_logprob, sampler_logprob }
    }

    /// Token with all three log-probabilities equal (on-policy, no mismatch).
    pub fn on_policy(id: u32, logprob: f64) -> Self {
        Token::new(id, logprob, logprob, logprob)
    }
}

/// One agent turn: the tokens emitted before yielding to the environment,
/// plus the flags recorded from execution feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub tokens: Vec<Token>,
    /// True when the turn triggers an environment interaction.
    pub ends_with_tool_call: bool,
    /// True when the interaction failed (tool-call or execution error).
    pub error_flag: bool,
    /// True when the turn is considered relevant to the task at rollout time.
    pub relevance_flag: bool,
    /// Raw bytes returned by the environment; empty when no tool call.
    #[serde(default)]
    pub observation: Vec<u8>,
}

impl Turn {
    pub fn new(tokens: Vec<Token>, ends_with_tool_call: bool) -> Self {
        Turn {
            tokens,
            ends_with_tool_call,
            error_flag: false,
            relevance_flag: true,
            observation: Vec::new(),
        }
    }

    pub fn with_observation(mut self, observation: Vec<u8>) -> Self {
        self.observation = observation;
        self
    }

    pub fn with_error(mut self, error_flag: bool) -> Self {
        self.error_flag = error_flag;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Why a trajectory was rejected by dynamic filtering, when it was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilteredReason {
    ApiFailure,
    NondeterministicTool,
    IllegalToolRepeat,
}

/// A finished multi-turn trajectory with its terminal reward and the policy
/// version that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<Turn>,
    pub final_reward: f64,
    pub policy_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered_reason: Option<FilteredReason>,
}

impl Trajectory {
    /// Builds a trajectory, checking the structural invariants: at least one
    /// turn, no empty turns, finite non-positive log-probabilities, and
    /// observations only on tool-calling turns.
    pub fn new(
        turns: Vec<Turn>,
        final_reward: f64,
        policy_version: u64,
        filtered_reason: Option<FilteredReason>,
    ) -> Result<Self> {
        let traj = Trajectory { turns, final_reward, policy_version, filtered_reason };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.tokens.is_empty() {
                return Err(Error::EmptyTurn(i));
            }
            if !turn.observation.is_empty() && !turn.ends_with_tool_call {
                return Err(Error::ObservationWithoutToolCall(i));
            }
            for token in &turn.tokens {
                for lp in [token.trainer_logprob, token.trainer_old_logprob, token.sampler_logprob] {
                    if !lp.is_finite() || lp > 0.0 {
                        return Err(Error::InvalidLogprob { turn: i, value: lp });
                    }
                }
            }
        }
        Ok(())
    }

    /// Total token count across turns.
    pub fn token_count(&self) -> usize {
        self.turns.iter().map(Turn::len).sum()
    }

    /// Global turn index for each flattened token position.
    pub fn turn_of_token(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.token_count());
        for (i, turn) in self.turns.iter().enumerate() {
            out.extend(std::iter::repeat(i).take(turn.len()));
        }
        out
    }
}

/// A contiguous token span ending at an environment interaction; the action
/// unit of chunk-level credit assignment. Indices are 1-based to match the
/// usual k in 1..=K numbering of chunk returns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// 1-based chunk index.
    pub index: usize,
    /// Half-open token range into the flattened token sequence.
    pub start: usize,
    pub end: usize,
    /// True for the last chunk of the trajectory.
    pub terminal: bool,
}

impl Chunk {
    pub fn token_range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Splits a trajectory into interaction chunks: a chunk boundary falls after
/// every tool-calling turn, and any trailing non-tool turns (the final
/// answer) form one terminal chunk.
///
/// The returned spans partition `[0, token_count)` exactly.
pub fn segment_into_chunks(traj: &Trajectory) -> Result<Vec<Chunk>> {
    if traj.turns.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let mut chunks = Vec::new();
    let mut start = 0usize;
    let mut pos = 0usize;
    for turn in &traj.turns {
        pos += turn.len();
        if turn.ends_with_tool_call {
            chunks.push(Chunk { index: chunks.len() + 1, start, end: pos, terminal: false });
            start = pos;
        }
    }
    if pos > start {
        chunks.push(Chunk { index: chunks.len() + 1, start, end: pos, terminal: false });
    }
    if let Some(last) = chunks.last_mut() {
        last.terminal = true;
    }
    Ok(chunks)
}

/// Concatenates the per-turn token lists in turn order.
pub fn flatten_tokens(traj: &Trajectory) -> Vec<Token> {
    traj.turns.iter().flat_map(|t| t.tokens.iter().copied()).collect()
}

/// Checks that `chunks` is exactly the segmentation of `traj`.
pub fn verify_segmentation(traj: &Trajectory, chunks: &[Chunk]) -> Result<()> {
    let expected = segment_into_chunks(traj)?;
    if expected.as_slice() != chunks {
        return Err(Error::BadSegmentation(format!(
            "expected {} chunks over {} tokens",
            expected.len(),
            traj.token_count()
        )));
    }
    Ok(())
}

/// Writes trajectories as line-delimited JSON, one trajectory per line.
/// Floats round-trip exactly (shortest-representation encoding).
pub fn write_trajectories<W: Write>(mut writer: W, trajectories: &[Trajectory]) -> Result<()> {
    for traj in trajectories {
        serde_json::to_writer(&mut writer, traj)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads line-delimited trajectories, validating each record.
pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)?;
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}

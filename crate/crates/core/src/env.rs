//! Deterministic toy multi-turn tool environments with planted crucial forks
//! and sparse terminal rewards, behind a make/reset/step/close lifecycle.
//!
//! Each agent turn is one environment step. At fork turns the last token of
//! the submitted action list is the tool action and is scored against the
//! fork's correct set; the episode terminates after `chunk_count` turns with
//! reward 1 iff every fork passed. Difficulty is therefore analytic: a
//! uniform-random policy succeeds with probability `prod(|correct| / vocab)`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::FilteredReason;

/// Noise injected by the environment, exercised by dynamic trajectory
/// filtering. `ApiFailure` flags tool turns as errored with the given
/// probability (reproducible per reset seed); `Nondeterministic` marks the
/// environment as refusing prefix replay and taints trajectories with the
/// given probability from a non-replayable randomness source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    None,
    ApiFailure { prob: f64 },
    Nondeterministic { prob: f64 },
}

impl Default for NoiseMode {
    fn default() -> Self {
        NoiseMode::None
    }
}

/// A decision point: at turn `chunk` the tool action must fall in `correct`
/// for the episode to end with reward 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkSpec {
    /// 1-based chunk index.
    pub chunk: usize,
    /// Correct tool actions; a non-empty proper subset of the vocabulary.
    pub correct: Vec<u32>,
}

/// Static description of a toy environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    /// Number of interaction chunks (= agent turns) in an episode.
    pub chunk_count: usize,
    /// Action vocabulary size.
    pub vocab_size: usize,
    #[serde(default)]
    pub fork_positions: Vec<ForkSpec>,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// Upper bound on turns; must admit a full episode.
    pub max_turns: usize,
}

impl EnvSpec {
    /// A fork-free spec: every action sequence earns reward 1.
    pub fn trivial(chunk_count: usize, vocab_size: usize) -> Self {
        EnvSpec {
            chunk_count,
            vocab_size,
            fork_positions: Vec::new(),
            noise_mode: NoiseMode::None,
            max_turns: chunk_count,
        }
    }

    /// Spec with forks at the given chunk indices.
    pub fn with_forks(chunk_count: usize, vocab_size: usize, forks: &[(usize, &[u32])]) -> Self {
        let fork_positions = forks
            .iter()
            .map(|&(chunk, correct)| ForkSpec { chunk, correct: correct.to_vec() })
            .collect();
        EnvSpec {
            chunk_count,
            vocab_size,
            fork_positions,
            noise_mode: NoiseMode::None,
            max_turns: chunk_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_count == 0 {
            return Err(Error::InvalidSpec("chunk_count must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidSpec("vocab_size must be >= 1".into()));
        }
        if self.max_turns < self.chunk_count {
            return Err(Error::InvalidSpec(format!(
                "max_turns {} cannot be below chunk_count {}",
                self.max_turns, self.chunk_count
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for fork in &self.fork_positions {
            let k = fork.chunk;
            if k == 0 || k > self.chunk_count {
                return Err(Error::InvalidSpec(format!(
                    "fork index {k} outside 1..={}",
                    self.chunk_count
                )));
            }
            if !seen.insert(k) {
                return Err(Error::InvalidSpec(format!("duplicate fork index {k}")));
            }
            if fork.correct.is_empty() {
                return Err(Error::InvalidSpec(format!("fork {k} has an empty correct set")));
            }
            if fork.correct.len() >= self.vocab_size {
                return Err(Error::InvalidSpec(format!(
                    "fork {k} correct set must be a proper subset of the vocabulary"
                )));
            }
            if fork.correct.iter().any(|&a| (a as usize) >= self.vocab_size) {
                return Err(Error::InvalidSpec(format!("fork {k} correct set exceeds the vocabulary")));
            }
        }
        match self.noise_mode {
            NoiseMode::None => {}
            NoiseMode::ApiFailure { prob } | NoiseMode::Nondeterministic { prob } => {
                if !(0.0..=1.0).contains(&prob) {
                    return Err(Error::InvalidSpec("noise probability must be in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Correct action set at a fork chunk, if any.
    pub fn fork_at(&self, chunk: usize) -> Option<&[u32]> {
        self.fork_positions
            .iter()
            .find(|f| f.chunk == chunk)
            .map(|f| f.correct.as_slice())
    }

    /// Probability that a uniform-random policy passes every fork:
    /// the product over forks of `|correct| / vocab_size`.
    pub fn random_policy_success_rate(&self) -> f64 {
        self.fork_positions
            .iter()
            .map(|f| f.correct.len() as f64 / self.vocab_size as f64)
            .product()
    }

    /// Stable content hash of the spec (hex SHA-256 of its canonical JSON).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("spec serialization cannot fail");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Short symbolic marker bytes; never reveals fork correct sets.
    pub observation: Vec<u8>,
    pub terminated: bool,
    /// Terminal reward; present iff `terminated`.
    pub reward: Option<f64>,
    /// True when this turn's tool call failed (noise-injected).
    pub error_flag: bool,
    /// Suggested filtering tag, reported on the terminal step.
    pub filtered_reason: Option<FilteredReason>,
}

/// In-process environment interface used by rollouts and resampling.
pub trait Environment {
    /// Returns the episode to its initial state; the same seed reproduces the
    /// same transition randomness.
    fn reset(&mut self, seed: u64) -> Vec<u8>;
    /// Consumes one agent turn. Errors when the episode is already terminated
    /// or the token list is empty.
    fn step(&mut self, action_tokens: &[u32]) -> Result<StepOutcome>;
    /// Whether replaying a recorded action sequence reproduces the episode.
    fn is_deterministic(&self) -> bool;
    fn spec(&self) -> &EnvSpec;
}

// Source of non-replayable randomness for NoiseMode::Nondeterministic: a
// process-global counter, deliberately not reset by `reset(seed)`.
static NONDET_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A single toy environment episode.
#[derive(Debug)]
pub struct SimEnv {
    spec: EnvSpec,
    instance_id: u64,
    turn_index: usize,
    fork_failed: bool,
    terminated: bool,
    any_api_error: bool,
    nondet_tainted: bool,
    noise_rng: ChaCha8Rng,
    last_actions: Option<Vec<u32>>,
    repeat_count: usize,
}

/// Consecutive identical action lists beyond this count are tagged as an
/// illegal tool repeat.
const ILLEGAL_REPEAT_LIMIT: usize = 3;

impl SimEnv {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SimEnv {
            spec,
            instance_id: 0,
            turn_index: 0,
            fork_failed: false,
            terminated: false,
            any_api_error: false,
            nondet_tainted: false,
            noise_rng: ChaCha8Rng::seed_from_u64(0),
            last_actions: None,
            repeat_count: 0,
        })
    }

    pub fn turn_index(&self) -> usize {
        self.turn_index
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    fn filtered_reason(&self) -> Option<FilteredReason> {
        if self.repeat_count >= ILLEGAL_REPEAT_LIMIT {
            Some(FilteredReason::IllegalToolRepeat)
        } else if self.nondet_tainted {
            Some(FilteredReason::NondeterministicTool)
        } else if self.any_api_error {
            Some(FilteredReason::ApiFailure)
        } else {
            None
        }
    }
}

impl Environment for SimEnv {
    fn reset(&mut self, seed: u64) -> Vec<u8> {
        self.turn_index = 0;
        self.fork_failed = false;
        self.terminated = false;
        self.any_api_error = false;
        self.nondet_tainted = false;
        self.noise_rng = ChaCha8Rng::seed_from_u64(seed);
        self.last_actions = None;
        self.repeat_count = 0;
        b"start".to_vec()
    }

    fn step(&mut self, action_tokens: &[u32]) -> Result<StepOutcome> {
        if self.terminated {
            return Err(Error::Terminated(self.instance_id));
        }
        if action_tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.turn_index >= self.spec.max_turns {
            return Err(Error::Terminated(self.instance_id));
        }

        if self.last_actions.as_deref() == Some(action_tokens) {
            self.repeat_count += 1;
        } else {
            self.repeat_count = 1;
            self.last_actions = Some(action_tokens.to_vec());
        }

        self.turn_index += 1;
        let chunk = self.turn_index; // 1-based; one chunk per turn
        let tool_action = *action_tokens.last().expect("non-empty");

        let mut error_flag = false;
        match self.spec.noise_mode {
            NoiseMode::None => {}
            NoiseMode::ApiFailure { prob } => {
                if self.noise_rng.random_range(0.0..1.0) < prob {
                    error_flag = true;
                    self.any_api_error = true;
                }
            }
            NoiseMode::Nondeterministic { prob } => {
                let draw = NONDET_COUNTER.fetch_add(1, Ordering::Relaxed);
                let mut rng = ChaCha8Rng::seed_from_u64(draw ^ 0x9e3779b97f4a7c15);
                if rng.random_range(0.0..1.0) < prob {
                    self.nondet_tainted = true;
                }
            }
        }

        let observation: Vec<u8> = match self.spec.fork_at(chunk) {
            Some(correct) => {
                if correct.contains(&tool_action) {
                    b"fork pass".to_vec()
                } else {
                    self.fork_failed = true;
                    b"fork fail".to_vec()
                }
            }
            None => b"ok".to_vec(),
        };

        if self.turn_index == self.spec.chunk_count {
            self.terminated = true;
            let reward = if self.fork_failed { 0.0 } else { 1.0 };
            return Ok(StepOutcome {
                observation: b"done".to_vec(),
                terminated: true,
                reward: Some(reward),
                error_flag,
                filtered_reason: self.filtered_reason(),
            });
        }

        Ok(StepOutcome { observation, terminated: false, reward: None, error_flag, filtered_reason: None })
    }

    fn is_deterministic(&self) -> bool {
        !matches!(self.spec.noise_mode, NoiseMode::Nondeterministic { .. })
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }
}

/// Registry managing environment instances behind the four lifecycle verbs.
/// Safe for concurrent use; operations on a single instance are serialized.
#[derive(Debug, Default)]
pub struct EnvRegistry {
    inner: Mutex<RegistryInner>,
}

#[derive(Debug, Default)]
struct RegistryInner {
    next_id: u64,
    instances: HashMap<u64, SimEnv>,
}

impl EnvRegistry {
    pub fn new() -> Self {
        EnvRegistry::default()
    }

    /// Creates a fresh instance in its initial state and returns its id.
    pub fn make(&self, spec: EnvSpec) -> Result<u64> {
        let mut env = SimEnv::new(spec)?;
        let mut inner = self.inner.lock().expect("registry poisoned");
        inner.next_id += 1;
        let id = inner.next_id;
        env.instance_id = id;
        inner.instances.insert(id, env);
        Ok(id)
    }

    /// Resets an instance; returns the initial observation.
    pub fn reset(&self, instance_id: u64, seed: u64) -> Result<Vec<u8>> {
        let mut inner = self.inner.lock().expect("registry poisoned");
        let env = inner.instances.get_mut(&instance_id).ok_or(Error::UnknownInstance(instance_id))?;
        Ok(env.reset(seed))
    }

    /// Advances an instance by one agent turn.
    pub fn step(&self, instance_id: u64, action_tokens: &[u32]) -> Result<StepOutcome> {
        let mut inner = self.inner.lock().expect("registry poisoned");
        let env = inner.instances.get_mut(&instance_id).ok_or(Error::UnknownInstance(instance_id))?;
        env.step(action_tokens)
    }

    /// Releases an instance. A second close on the same id errors.
    pub fn close(&self, instance_id: u64) -> Result<()> {
        let mut inner = self.inner.lock().expect("registry poisoned");
        inner
            .instances
            .remove(&instance_id)
            .map(|_| ())
            .ok_or(Error::UnknownInstance(instance_id))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("registry poisoned").instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fork_spec() -> EnvSpec {
        EnvSpec::with_forks(5, 3, &[(2, &[1]), (4, &[0])])
    }

    #[test]
    fn make_initializes_fresh_instance() {
        let reg = EnvRegistry::new();
        let id = reg.make(fork_spec()).unwrap();
        assert!(id > 0);
        let id2 = reg.make(fork_spec()).unwrap();
        assert_ne!(id, id2);
    }

    #[test]
    fn invalid_fork_index_rejected() {
        let spec = EnvSpec::with_forks(3, 3, &[(4, &[1])]);
        assert!(matches!(SimEnv::new(spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn correct_set_must_be_proper_subset() {
        let spec = EnvSpec::with_forks(3, 2, &[(1, &[0, 1])]);
        assert!(SimEnv::new(spec).is_err());
        let spec = EnvSpec::with_forks(3, 2, &[(1, &[])]);
        assert!(SimEnv::new(spec).is_err());
    }

    #[test]
    fn all_forks_correct_earns_reward_one() {
        let mut env = SimEnv::new(fork_spec()).unwrap();
        env.reset(0);
        let actions = [2u32, 1, 2, 0, 2]; // forks at turns 2 and 4 answered correctly
        let mut last = None;
        for &a in &actions {
            last = Some(env.step(&[a]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.terminated);
        assert_eq!(last.reward, Some(1.0));
    }

    #[test]
    fn one_failed_fork_earns_zero() {
        let mut env = SimEnv::new(fork_spec()).unwrap();
        env.reset(0);
        let actions = [2u32, 1, 2, 1, 2]; // fork at turn 4 answered wrong
        let mut last = None;
        for &a in &actions {
            last = Some(env.step(&[a]).unwrap());
        }
        assert_eq!(last.unwrap().reward, Some(0.0));
    }

    #[test]
    fn reward_soundness_by_exhaustive_enumeration() {
        // K = 3, vocab 3, forks at chunks 1 and 3. Enumerate all 27 action
        // sequences and compare the environment's reward with the definition.
        let spec = EnvSpec::with_forks(3, 3, &[(1, &[0, 2]), (3, &[1])]);
        for a0 in 0..3u32 {
            for a1 in 0..3u32 {
                for a2 in 0..3u32 {
                    let mut env = SimEnv::new(spec.clone()).unwrap();
                    env.reset(7);
                    env.step(&[a0]).unwrap();
                    env.step(&[a1]).unwrap();
                    let out = env.step(&[a2]).unwrap();
                    let expected = if (a0 == 0 || a0 == 2) && a2 == 1 { 1.0 } else { 0.0 };
                    assert_eq!(out.reward, Some(expected), "sequence {a0},{a1},{a2}");
                }
            }
        }
    }

    #[test]
    fn deterministic_replay_reproduces_episode() {
        let spec = EnvSpec::with_forks(4, 4, &[(2, &[3])]);
        let run = |seed: u64| -> Vec<StepOutcome> {
            let mut env = SimEnv::new(spec.clone()).unwrap();
            env.reset(seed);
            (0..4).map(|i| env.step(&[i as u32]).unwrap()).collect()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn reset_mid_episode_clears_state() {
        let mut env = SimEnv::new(fork_spec()).unwrap();
        env.reset(1);
        env.step(&[0]).unwrap();
        env.step(&[0]).unwrap(); // fails fork 2
        env.reset(1);
        assert_eq!(env.turn_index(), 0);
        let actions = [2u32, 1, 2, 0, 2];
        let mut last = None;
        for &a in &actions {
            last = Some(env.step(&[a]).unwrap());
        }
        assert_eq!(last.unwrap().reward, Some(1.0), "fork record must be cleared by reset");
    }

    #[test]
    fn stepping_after_termination_errors() {
        let mut env = SimEnv::new(EnvSpec::trivial(1, 2)).unwrap();
        env.reset(0);
        let out = env.step(&[0]).unwrap();
        assert!(out.terminated);
        assert!(matches!(env.step(&[0]), Err(Error::Terminated(_))));
    }

    #[test]
    fn registry_lifecycle_and_double_close() {
        let reg = EnvRegistry::new();
        let id = reg.make(EnvSpec::trivial(2, 2)).unwrap();
        reg.reset(id, 3).unwrap();
        reg.step(id, &[1]).unwrap();
        reg.close(id).unwrap();
        assert!(matches!(reg.step(id, &[1]), Err(Error::UnknownInstance(_))));
        assert!(matches!(reg.close(id), Err(Error::UnknownInstance(_))));
        assert!(matches!(reg.reset(77, 0), Err(Error::UnknownInstance(77))));
        assert!(matches!(reg.close(78), Err(Error::UnknownInstance(78))));
    }

    #[test]
    fn api_failure_at_probability_one_flags_every_turn() {
        let mut spec = EnvSpec::trivial(3, 2);
        spec.noise_mode = NoiseMode::ApiFailure { prob: 1.0 };
        let mut env = SimEnv::new(spec).unwrap();
        env.reset(5);
        let mut last = None;
        for a in [0u32, 1, 0] {
            let out = env.step(&[a]).unwrap();
            assert!(out.error_flag);
            last = Some(out);
        }
        assert_eq!(last.unwrap().filtered_reason, Some(FilteredReason::ApiFailure));
    }

    #[test]
    fn nondeterministic_mode_advertises_itself() {
        let mut spec = EnvSpec::trivial(2, 2);
        spec.noise_mode = NoiseMode::Nondeterministic { prob: 0.5 };
        let env = SimEnv::new(spec).unwrap();
        assert!(!env.is_deterministic());
        assert!(SimEnv::new(EnvSpec::trivial(2, 2)).unwrap().is_deterministic());
    }

    #[test]
    fn repeated_identical_actions_flag_illegal_repeat() {
        let mut env = SimEnv::new(EnvSpec::trivial(4, 3)).unwrap();
        env.reset(0);
        let mut last = None;
        for _ in 0..4 {
            last = Some(env.step(&[2]).unwrap());
        }
        assert_eq!(last.unwrap().filtered_reason, Some(FilteredReason::IllegalToolRepeat));
    }

    #[test]
    fn analytic_success_rate_is_product_over_forks() {
        let spec = EnvSpec::with_forks(6, 4, &[(2, &[0]), (3, &[1, 2]), (5, &[3])]);
        let expected = (1.0 / 4.0) * (2.0 / 4.0) * (1.0 / 4.0);
        assert_eq!(spec.random_policy_success_rate(), expected);
        assert_eq!(EnvSpec::trivial(3, 5).random_policy_success_rate(), 1.0);
    }

    #[test]
    fn content_hash_is_stable_and_distinguishes_specs() {
        let a = fork_spec();
        let b = fork_spec();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = EnvSpec::with_forks(5, 3, &[(2, &[1])]);
        assert_ne!(a.content_hash(), c.content_hash());
    }
}

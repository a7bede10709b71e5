//! Rollout plumbing: generating trajectories from a sampler policy against an
//! environment, pairing trajectories with the per-turn state features they
//! were generated under, refreshing trainer log-probabilities, and assembling
//! filtered batches with on-the-fly resampling.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{SamplerVariant, ToyPolicy};
use crate::trajectory::{Token, Trajectory, Turn};

/// Derives a child seed from a base seed and a tag path. Streams derived with
/// different tags are independent, which keeps evaluation rollouts from
/// perturbing training randomness.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the folded tag sequence
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
        state ^= state >> 31;
    }
    state
}

/// State-feature convention for the toy environments: a one-hot indicator of
/// the turn index plus a constant bias slot at the last position. Turn
/// indices beyond `feature_dim - 2` collapse onto the last indicator slot.
pub fn turn_features(turn_index: usize, feature_dim: usize) -> Array1<f64> {
    assert!(feature_dim >= 2, "feature_dim must be at least 2");
    let mut x = Array1::zeros(feature_dim);
    let slot = turn_index.min(feature_dim - 2);
    x[slot] = 1.0;
    x[feature_dim - 1] = 1.0;
    x
}

/// A trajectory paired with the state features of each turn. The features are
/// the `s_k` of the loss definitions; keeping them explicit makes every loss
/// and gradient a pure function of `(episode, policy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub states: Vec<Array1<f64>>,
}

impl Episode {
    pub fn new(trajectory: Trajectory, states: Vec<Array1<f64>>) -> Result<Self> {
        if states.len() != trajectory.turns.len() {
            return Err(Error::LengthMismatch { left: states.len(), right: trajectory.turns.len() });
        }
        Ok(Episode { trajectory, states })
    }

    /// Pairs a trajectory with the positional feature convention.
    pub fn from_positional(trajectory: Trajectory, feature_dim: usize) -> Result<Self> {
        let states = (0..trajectory.turns.len()).map(|i| turn_features(i, feature_dim)).collect();
        Episode::new(trajectory, states)
    }

    /// Recomputes every token's `trainer_logprob` under `policy`, leaving the
    /// generation-time fields untouched. Call before computing gradients so
    /// the stored ratios reflect the live trainer.
    pub fn annotate_trainer(&mut self, policy: &ToyPolicy) -> Result<()> {
        for (turn, state) in self.trajectory.turns.iter_mut().zip(&self.states) {
            let log_probs = policy.log_probs(state)?;
            for token in &mut turn.tokens {
                if (token.id as usize) >= log_probs.len() {
                    return Err(Error::ActionOutOfRange { action: token.id, vocab: log_probs.len() });
                }
                token.trainer_logprob = log_probs[token.id as usize];
            }
        }
        Ok(())
    }
}

/// Rollout shape knobs.
#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    /// Tokens emitted per turn; the last one is the tool action.
    pub turn_tokens: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { turn_tokens: 1 }
    }
}

/// Samples one full episode from the environment with the sampler policy.
///
/// Every token records its log-probability under the sampler, under the
/// sampler's base (the trainer snapshot at generation time), and a trainer
/// log-probability initialized to the snapshot value.
pub fn run_rollout<E: Environment>(
    env: &mut E,
    sampler: &SamplerVariant,
    policy_version: u64,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<Episode> {
    if cfg.turn_tokens == 0 {
        return Err(Error::InvalidConfig("turn_tokens must be >= 1".into()));
    }
    let feature_dim = sampler.base().feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    env.reset(derive_seed(seed, &[2]));

    let mut turns = Vec::new();
    let mut states = Vec::new();
    loop {
        let turn_index = turns.len();
        let x = turn_features(turn_index, feature_dim);
        let mut tokens = Vec::with_capacity(cfg.turn_tokens);
        let mut ids = Vec::with_capacity(cfg.turn_tokens);
        for _ in 0..cfg.turn_tokens {
            let id = sampler.sample_action(&x, &mut rng)?;
            let sampler_lp = sampler.logprob(&x, id)?;
            let old_lp = sampler.base().logprob(&x, id)?;
            tokens.push(Token::new(id, old_lp, old_lp, sampler_lp));
            ids.push(id);
        }
        let outcome = env.step(&ids)?;
        let turn = Turn {
            tokens,
            ends_with_tool_call: true,
            error_flag: outcome.error_flag,
            relevance_flag: true,
            observation: outcome.observation.clone(),
        };
        turns.push(turn);
        states.push(x);
        if outcome.terminated {
            let reward = outcome.reward.unwrap_or(0.0);
            let trajectory = Trajectory::new(turns, reward, policy_version, outcome.filtered_reason)?;
            return Episode::new(trajectory, states);
        }
        if turns.len() > env.spec().max_turns {
            return Err(Error::InvalidSpec("environment exceeded max_turns without terminating".into()));
        }
    }
}

/// Accept/reject decision of dynamic trajectory filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(crate::trajectory::FilteredReason),
}

/// Rejects trajectories whose reward is unreliable: transient API failures,
/// non-deterministic tool responses, or repeated illegal tool invocations.
pub fn filter_trajectory(traj: &Trajectory) -> FilterDecision {
    match traj.filtered_reason {
        Some(reason) => FilterDecision::Reject(reason),
        None => FilterDecision::Accept,
    }
}

/// Counters from batch assembly under filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub rejected: usize,
    /// Slots dropped after the retry budget was exhausted.
    pub dropped_slots: usize,
}

/// Collects `batch_size` accepted episodes, re-rolling each rejected slot
/// from the same initial state up to `retry_budget` attempts. A slot that
/// exhausts its budget is dropped rather than blocking the batch.
pub fn collect_filtered_batch<E: Environment>(
    env: &mut E,
    sampler: &SamplerVariant,
    policy_version: u64,
    batch_size: usize,
    retry_budget: usize,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<(Vec<Episode>, FilterStats)> {
    let mut episodes = Vec::with_capacity(batch_size);
    let mut stats = FilterStats::default();
    for slot in 0..batch_size {
        let mut accepted = None;
        for attempt in 0..retry_budget.max(1) {
            let rollout_seed = derive_seed(seed, &[slot as u64, attempt as u64]);
            let episode = run_rollout(env, sampler, policy_version, rollout_seed, cfg)?;
            match filter_trajectory(&episode.trajectory) {
                FilterDecision::Accept => {
                    accepted = Some(episode);
                    break;
                }
                FilterDecision::Reject(_) => stats.rejected += 1,
            }
        }
        match accepted {
            Some(e) => episodes.push(e),
            None => stats.dropped_slots += 1,
        }
    }
    Ok((episodes, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, NoiseMode, SimEnv};
    use crate::trajectory::FilteredReason;

    fn sampler(vocab: usize, dim: usize) -> SamplerVariant {
        SamplerVariant::exact(ToyPolicy::zeros(dim, vocab).unwrap())
    }

    #[test]
    fn rollout_produces_valid_segmentable_episode() {
        let mut env = SimEnv::new(EnvSpec::with_forks(4, 3, &[(2, &[0])])).unwrap();
        let cfg = RolloutConfig { turn_tokens: 3 };
        let ep = run_rollout(&mut env, &sampler(3, 6), 5, 42, &cfg).unwrap();
        assert_eq!(ep.trajectory.turns.len(), 4);
        assert_eq!(ep.trajectory.token_count(), 12);
        assert_eq!(ep.trajectory.policy_version, 5);
        ep.trajectory.validate().unwrap();
        let chunks = crate::trajectory::segment_into_chunks(&ep.trajectory).unwrap();
        assert_eq!(chunks.len(), 4);
    }

    #[test]
    fn rollout_is_deterministic_per_seed() {
        let spec = EnvSpec::with_forks(3, 4, &[(1, &[2])]);
        let cfg = RolloutConfig { turn_tokens: 2 };
        let mut env = SimEnv::new(spec.clone()).unwrap();
        let a = run_rollout(&mut env, &sampler(4, 5), 0, 7, &cfg).unwrap();
        let mut env = SimEnv::new(spec).unwrap();
        let b = run_rollout(&mut env, &sampler(4, 5), 0, 7, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn annotate_trainer_refreshes_only_trainer_field() {
        let mut env = SimEnv::new(EnvSpec::trivial(2, 3)).unwrap();
        let base = ToyPolicy::zeros(4, 3).unwrap();
        let mut ep =
            run_rollout(&mut env, &SamplerVariant::exact(base.clone()), 0, 3, &RolloutConfig::default())
                .unwrap();
        let old_snapshot: Vec<f64> = crate::trajectory::flatten_tokens(&ep.trajectory)
            .iter()
            .map(|t| t.trainer_old_logprob)
            .collect();
        let shifted = base.updated(&(ndarray::Array2::ones((4, 3)) * 0.3)).unwrap();
        ep.annotate_trainer(&shifted).unwrap();
        for (tok, &old) in crate::trajectory::flatten_tokens(&ep.trajectory).iter().zip(&old_snapshot) {
            assert_eq!(tok.trainer_old_logprob, old);
            // uniform shift leaves softmax unchanged, so trainer == old here
            assert!((tok.trainer_logprob - old).abs() < 1e-12);
        }
        let skewed = {
            let mut delta = ndarray::Array2::zeros((4, 3));
            delta[(0, 1)] = 1.0;
            base.updated(&delta).unwrap()
        };
        ep.annotate_trainer(&skewed).unwrap();
        let any_changed = crate::trajectory::flatten_tokens(&ep.trajectory)
            .iter()
            .zip(&old_snapshot)
            .any(|(tok, &old)| (tok.trainer_logprob - old).abs() > 1e-9);
        assert!(any_changed);
    }

    #[test]
    fn clean_trajectory_accepted_flagged_rejected() {
        let mut env = SimEnv::new(EnvSpec::trivial(2, 2)).unwrap();
        let ep = run_rollout(&mut env, &sampler(2, 4), 0, 1, &RolloutConfig::default()).unwrap();
        assert_eq!(filter_trajectory(&ep.trajectory), FilterDecision::Accept);

        let mut flagged = ep.trajectory.clone();
        flagged.filtered_reason = Some(FilteredReason::IllegalToolRepeat);
        assert_eq!(
            filter_trajectory(&flagged),
            FilterDecision::Reject(FilteredReason::IllegalToolRepeat)
        );
    }

    #[test]
    fn filtered_batch_preserves_batch_size_with_budget() {
        // A fifth of tool turns fail; with a retry budget the accepted batch
        // still reaches the requested size.
        let mut spec = EnvSpec::trivial(2, 4);
        spec.noise_mode = NoiseMode::ApiFailure { prob: 0.2 };
        let mut env = SimEnv::new(spec).unwrap();
        let (batch, stats) =
            collect_filtered_batch(&mut env, &sampler(4, 5), 0, 12, 8, 99, &RolloutConfig::default())
                .unwrap();
        assert_eq!(batch.len(), 12);
        assert!(stats.rejected > 0);
        assert_eq!(stats.dropped_slots, 0);
        for ep in &batch {
            assert_eq!(ep.trajectory.filtered_reason, None);
        }
    }

    #[test]
    fn exhausted_budget_drops_slot() {
        let mut spec = EnvSpec::trivial(2, 2);
        spec.noise_mode = NoiseMode::ApiFailure { prob: 1.0 };
        let mut env = SimEnv::new(spec).unwrap();
        let (batch, stats) =
            collect_filtered_batch(&mut env, &sampler(2, 4), 0, 4, 3, 1, &RolloutConfig::default())
                .unwrap();
        assert!(batch.is_empty());
        assert_eq!(stats.dropped_slots, 4);
        assert_eq!(stats.rejected, 12);
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(42, &[1, 2]);
        let b = derive_seed(42, &[1, 3]);
        let c = derive_seed(42, &[2, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, &[1, 2]));
    }

    #[test]
    fn turn_features_one_hot_plus_bias() {
        let x = turn_features(2, 6);
        assert_eq!(x.to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        // saturation beyond the indicator range
        let x = turn_features(9, 4);
        assert_eq!(x.to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
    }
}

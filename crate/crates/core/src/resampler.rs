//! Expert-prefix resampling: dynamic trajectory filtering with on-the-fly
//! refills, crucial-fork detection, sequential rollback, and parallelized
//! initialization.
//!
//! All operations replay a prefix of an expert trajectory's actions against a
//! deterministic environment and let the current policy sample the
//! continuation. Success rates conditioned on prefix length expose the
//! decision points ("crucial forks") where the policy's next chunk
//! disproportionately determines the terminal reward.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::SamplerVariant;
use crate::rollout::{derive_seed, turn_features, Episode, RolloutConfig};
use crate::trajectory::{segment_into_chunks, Chunk, Token, Trajectory, Turn};

/// A validated successful trajectory whose chunk prefixes seed resampling.
#[derive(Debug, Clone)]
pub struct ExpertTrajectory {
    pub episode: Episode,
    pub chunks: Vec<Chunk>,
    /// Policy version at which this expert trace was last regenerated.
    pub refresh_version: u64,
}

impl ExpertTrajectory {
    /// Wraps a successful episode (reward above `positive_cutoff`).
    pub fn new(episode: Episode, positive_cutoff: f64, refresh_version: u64) -> Result<Self> {
        if episode.trajectory.final_reward <= positive_cutoff {
            return Err(Error::InvalidConfig(format!(
                "expert trajectory reward {} is not above the cutoff {}",
                episode.trajectory.final_reward, positive_cutoff
            )));
        }
        let chunks = segment_into_chunks(&episode.trajectory)?;
        Ok(ExpertTrajectory { episode, chunks, refresh_version })
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    /// Number of leading turns covered by the first `prefix_chunks` chunks.
    fn turns_for_prefix(&self, prefix_chunks: usize) -> Result<usize> {
        if prefix_chunks == 0 {
            return Ok(0);
        }
        let target = self.chunks[prefix_chunks - 1].end;
        let mut tokens = 0usize;
        for (i, turn) in self.episode.trajectory.turns.iter().enumerate() {
            tokens += turn.len();
            if tokens == target {
                return Ok(i + 1);
            }
            if tokens > target {
                break;
            }
        }
        Err(Error::BadSegmentation("chunk boundary does not align with a turn".into()))
    }
}

/// Empirical evidence for a crucial fork at chunk `chunk_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkEstimate {
    /// The crucial chunk f (1-based).
    pub chunk_index: usize,
    /// Resampling success rate from the prefix ending before chunk f.
    pub success_rate_before: f64,
    /// Resampling success rate from the prefix including chunk f.
    pub success_rate_after: f64,
    pub sample_count: usize,
}

/// Resamples `n` trajectories: the expert's first `prefix_chunks` chunks are
/// replayed action-for-action, then the sampler policy continues to episode
/// end. Returns the episodes and the fraction with positive reward.
///
/// Requires a deterministic environment; replay divergence (the recorded
/// observations no longer match) is reported as an error.
#[allow(clippy::too_many_arguments)]
pub fn resample_from_prefix<E: Environment>(
    expert: &ExpertTrajectory,
    prefix_chunks: usize,
    env: &mut E,
    sampler: &SamplerVariant,
    policy_version: u64,
    n: usize,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<(Vec<Episode>, f64)> {
    if !env.is_deterministic() {
        return Err(Error::NondeterministicEnv);
    }
    let k = expert.chunk_count();
    if prefix_chunks >= k {
        return Err(Error::InvalidConfig(format!(
            "prefix_chunks {prefix_chunks} must be below the expert's chunk count {k}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    let replay_turns = expert.turns_for_prefix(prefix_chunks)?;
    let mut episodes = Vec::with_capacity(n);
    let mut successes = 0usize;
    for rollout_idx in 0..n {
        let rollout_seed = derive_seed(seed, &[prefix_chunks as u64, rollout_idx as u64]);
        let episode =
            replayed_rollout(expert, replay_turns, env, sampler, policy_version, rollout_seed, cfg)?;
        if episode.trajectory.final_reward > 0.0 {
            successes += 1;
        }
        episodes.push(episode);
    }
    let rate = successes as f64 / n as f64;
    Ok((episodes, rate))
}

fn replayed_rollout<E: Environment>(
    expert: &ExpertTrajectory,
    replay_turns: usize,
    env: &mut E,
    sampler: &SamplerVariant,
    policy_version: u64,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<Episode> {
    use rand::SeedableRng;
    let feature_dim = sampler.base().feature_dim();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    env.reset(derive_seed(seed, &[2]));

    let mut turns: Vec<Turn> = Vec::new();
    let mut states = Vec::new();
    let mut last_outcome = None;

    for turn_idx in 0..replay_turns {
        let expert_turn = &expert.episode.trajectory.turns[turn_idx];
        let ids: Vec<u32> = expert_turn.tokens.iter().map(|t| t.id).collect();
        let x = turn_features(turn_idx, feature_dim);
        let outcome = env.step(&ids)?;
        if outcome.observation != expert_turn.observation {
            return Err(Error::ReplayDiverged(format!(
                "observation mismatch at replayed turn {turn_idx}"
            )));
        }
        // Replayed tokens are forced, but still scored under the current
        // policies so every ratio stays well defined.
        let tokens: Vec<Token> = ids
            .iter()
            .map(|&id| {
                let sampler_lp = sampler.logprob(&x, id)?;
                let old_lp = sampler.base().logprob(&x, id)?;
                Ok(Token::new(id, old_lp, old_lp, sampler_lp))
            })
            .collect::<Result<_>>()?;
        turns.push(Turn {
            tokens,
            ends_with_tool_call: true,
            error_flag: outcome.error_flag,
            relevance_flag: true,
            observation: outcome.observation.clone(),
        });
        states.push(x);
        if outcome.terminated {
            last_outcome = Some(outcome);
            break;
        }
    }

    if last_outcome.is_none() {
        loop {
            let turn_idx = turns.len();
            let x = turn_features(turn_idx, feature_dim);
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
            turns.push(Turn {
                tokens,
                ends_with_tool_call: true,
                error_flag: outcome.error_flag,
                relevance_flag: true,
                observation: outcome.observation.clone(),
            });
            states.push(x);
            if outcome.terminated {
                last_outcome = Some(outcome);
                break;
            }
            if turns.len() > env.spec().max_turns {
                return Err(Error::InvalidSpec("environment exceeded max_turns".into()));
            }
        }
    }

    let outcome = last_outcome.expect("loop exits with a terminal outcome");
    let trajectory = Trajectory::new(
        turns,
        outcome.reward.unwrap_or(0.0),
        policy_version,
        outcome.filtered_reason,
    )?;
    Episode::new(trajectory, states)
}

/// Success rates from every prefix length `0..K-1`, in order. The shared
/// probe for fork detection and fork reports.
pub fn prefix_success_sweep<E: Environment>(
    expert: &ExpertTrajectory,
    env: &mut E,
    sampler: &SamplerVariant,
    n_per_prefix: usize,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<Vec<f64>> {
    let k = expert.chunk_count();
    let mut rates = Vec::with_capacity(k);
    for prefix in 0..k {
        let (_, rate) = resample_from_prefix(
            expert,
            prefix,
            env,
            sampler,
            0,
            n_per_prefix,
            derive_seed(seed, &[prefix as u64]),
            cfg,
        )?;
        rates.push(rate);
    }
    Ok(rates)
}

/// Finds the latest chunk `f` whose prefix-conditioned success rate drops by
/// at least `drop_threshold`: `rate(f-1) <= rate(f) - drop_threshold`, with a
/// strict drop required so a zero threshold means "any nonzero drop".
///
/// Probes prefixes `0..K-1`, so the terminal chunk is never reported.
pub fn detect_crucial_fork<E: Environment>(
    expert: &ExpertTrajectory,
    env: &mut E,
    sampler: &SamplerVariant,
    n_per_prefix: usize,
    drop_threshold: f64,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<Option<ForkEstimate>> {
    if n_per_prefix == 0 {
        return Err(Error::InvalidConfig("n_per_prefix must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&drop_threshold) {
        return Err(Error::InvalidConfig("drop_threshold must lie in [0, 1]".into()));
    }
    let rates = prefix_success_sweep(expert, env, sampler, n_per_prefix, seed, cfg)?;
    for f in (1..rates.len()).rev() {
        let before = rates[f - 1];
        let after = rates[f];
        if before <= after - drop_threshold && before < after {
            return Ok(Some(ForkEstimate {
                chunk_index: f,
                success_rate_before: before,
                success_rate_after: after,
                sample_count: n_per_prefix,
            }));
        }
    }
    Ok(None)
}

/// Curriculum state machine for sequential rollback: start resampling from
/// the longest proper prefix and step one chunk toward the initial state each
/// time the policy masters the current prefix.
#[derive(Debug, Clone)]
pub struct RollbackSchedule {
    current: usize,
    mastery_threshold: f64,
    finished: bool,
}

impl RollbackSchedule {
    pub fn new(chunk_count: usize, mastery_threshold: f64) -> Result<Self> {
        if chunk_count == 0 {
            return Err(Error::InvalidConfig("chunk_count must be >= 1".into()));
        }
        if !(mastery_threshold > 0.0 && mastery_threshold <= 1.0) {
            return Err(Error::InvalidConfig("mastery_threshold must lie in (0, 1]".into()));
        }
        Ok(RollbackSchedule { current: chunk_count - 1, mastery_threshold, finished: false })
    }

    /// Prefix length to resample from at the current step.
    pub fn current_prefix(&self) -> usize {
        self.current
    }

    /// True once prefix 0 has been mastered.
    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Feeds the empirical success rate observed at the current prefix;
    /// returns the prefix for the next step.
    pub fn observe(&mut self, success_rate: f64) -> usize {
        if !self.finished && success_rate >= self.mastery_threshold {
            if self.current > 0 {
                self.current -= 1;
            } else {
                self.finished = true;
            }
        }
        self.current
    }
}

/// Drives a rollback schedule over a stream of policies, probing each step's
/// prefix with `n_per_step` resamples. Returns the prefix used at each step;
/// the trace ends early once prefix 0 is mastered.
pub fn sequential_rollback_schedule<E, I>(
    expert: &ExpertTrajectory,
    env: &mut E,
    policies: I,
    n_per_step: usize,
    mastery_threshold: f64,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<Vec<usize>>
where
    E: Environment,
    I: IntoIterator<Item = SamplerVariant>,
{
    let mut schedule = RollbackSchedule::new(expert.chunk_count(), mastery_threshold)?;
    let mut trace = Vec::new();
    for (step, policy) in policies.into_iter().enumerate() {
        if schedule.is_finished() {
            break;
        }
        let prefix = schedule.current_prefix();
        trace.push(prefix);
        let (_, rate) = resample_from_prefix(
            expert,
            prefix,
            env,
            &policy,
            0,
            n_per_step,
            derive_seed(seed, &[step as u64]),
            cfg,
        )?;
        schedule.observe(rate);
    }
    Ok(trace)
}

/// How anchor prefixes are placed for parallelized initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorPlacement {
    /// Midpoints of `anchor_count` equal buckets over `0..K`:
    /// `floor((2i + 1) * K / (2n))` for `i` in `0..n`. Distinct for `n <= K`.
    Uniform,
    /// `anchor_count` distinct prefixes drawn without replacement.
    Random { seed: u64 },
}

/// Evenly spread anchor prefixes per the documented rounding rule.
pub fn uniform_anchors(chunk_count: usize, anchor_count: usize) -> Vec<usize> {
    (0..anchor_count)
        .map(|i| ((2 * i + 1) * chunk_count) / (2 * anchor_count))
        .collect()
}

/// One resampled rollout tagged with the anchor prefix it started from.
#[derive(Debug, Clone)]
pub struct AnchoredRollout {
    pub anchor_prefix: usize,
    pub episode: Episode,
}

/// A batch assembled by parallelized initialization.
#[derive(Debug, Clone)]
pub struct ParallelInitBatch {
    pub anchors: Vec<usize>,
    pub rollouts: Vec<AnchoredRollout>,
}

/// Launches `rollouts_per_anchor` independent resamples from each anchor
/// prefix. The batch is ordered by (anchor, rollout index) and has size
/// `anchor_count * rollouts_per_anchor`.
#[allow(clippy::too_many_arguments)]
pub fn parallel_init_batch<E: Environment>(
    expert: &ExpertTrajectory,
    anchor_count: usize,
    placement: AnchorPlacement,
    rollouts_per_anchor: usize,
    env: &mut E,
    sampler: &SamplerVariant,
    policy_version: u64,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<ParallelInitBatch> {
    let k = expert.chunk_count();
    if anchor_count == 0 || anchor_count > k {
        return Err(Error::InvalidConfig(format!("anchor_count must lie in 1..={k}")));
    }
    if rollouts_per_anchor == 0 {
        return Err(Error::InvalidConfig("rollouts_per_anchor must be >= 1".into()));
    }
    let anchors = match placement {
        AnchorPlacement::Uniform => uniform_anchors(k, anchor_count),
        AnchorPlacement::Random { seed } => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = (0..k).collect();
            all.shuffle(&mut rng);
            let mut picked: Vec<usize> = all.into_iter().take(anchor_count).collect();
            picked.sort_unstable();
            picked
        }
    };
    let mut rollouts = Vec::with_capacity(anchor_count * rollouts_per_anchor);
    for &anchor in &anchors {
        let (episodes, _) = resample_from_prefix(
            expert,
            anchor,
            env,
            sampler,
            policy_version,
            rollouts_per_anchor,
            derive_seed(seed, &[anchor as u64 + 1]),
            cfg,
        )?;
        rollouts.extend(
            episodes
                .into_iter()
                .map(|episode| AnchoredRollout { anchor_prefix: anchor, episode }),
        );
    }
    Ok(ParallelInitBatch { anchors, rollouts })
}

/// Self-samples an expert: rolls out with the current policy until a
/// successful, unfiltered trajectory appears, up to `budget` attempts.
pub fn bootstrap_expert<E: Environment>(
    env: &mut E,
    sampler: &SamplerVariant,
    policy_version: u64,
    positive_cutoff: f64,
    budget: usize,
    seed: u64,
    cfg: &RolloutConfig,
) -> Result<Option<ExpertTrajectory>> {
    for attempt in 0..budget {
        let episode = crate::rollout::run_rollout(
            env,
            sampler,
            policy_version,
            derive_seed(seed, &[attempt as u64]),
            cfg,
        )?;
        if episode.trajectory.filtered_reason.is_none()
            && episode.trajectory.final_reward > positive_cutoff
        {
            return Ok(Some(ExpertTrajectory::new(episode, positive_cutoff, policy_version)?));
        }
    }
    Ok(None)
}

/// One line of a fork report: prefix length, success rate, sample count, and
/// a logical timestamp (training step), enabling external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkReportRecord {
    pub prefix: usize,
    pub success_rate: f64,
    pub sample_count: usize,
    pub timestamp: u64,
}

/// Writes fork-report records as line-delimited JSON.
pub fn write_fork_report<W: Write>(mut w: W, records: &[ForkReportRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

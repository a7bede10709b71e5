//! Off-policy policy-gradient objectives.
//!
//! Two estimators share one structure: positive trajectories (reward above
//! the cutoff) receive reward-weighted likelihood updates with no importance
//! weighting, while non-positive trajectories receive updates weighted by a
//! geometric-mean importance ratio clipped to `[clip_low, clip_high]`.
//! Tokens or chunks whose trainer-snapshot/sampler ratio exceeds the
//! mismatch threshold `H` are masked out of the update entirely.
//!
//! The baseline estimator applies the ratio, clip, and mask at trajectory and
//! token granularity. The chunk-level estimator moves all three to
//! interaction chunks and scales each chunk by a discounted return
//! `G_k = gamma^(K - k) * R_final`, so credit concentrates on chunks close to
//! the terminal outcome. The hybrid estimator adds an imitation term over a
//! prefix of an expert trajectory for curriculum resampling.
//!
//! Importance ratios and masks are pure functions of the log-probabilities
//! stored on trajectory tokens; only the `grad log pi` terms are recomputed
//! from the live policy. Each gradient function has a companion scalar
//! objective whose exact parameter gradient it is (ratios, masks, and returns
//! enter as constants), which is what the finite-difference checks exercise.
//!
//! Accumulation order is fixed (trajectory-major, chunk-minor, token-minor)
//! so results are bit-reproducible.

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::policy::ToyPolicy;
use crate::rollout::Episode;
use crate::trajectory::{flatten_tokens, verify_segmentation, Chunk, Token, Trajectory};

/// Configuration of the RL objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlConfig {
    /// Chunk-level discount in (0, 1].
    pub gamma: f64,
    /// Mismatch threshold H on the trainer-snapshot/sampler ratio.
    pub mismatch_threshold: f64,
    /// Importance-ratio clip bounds.
    pub clip_low: f64,
    pub clip_high: f64,
    /// Weight of the imitation term in the hybrid objective.
    pub lambda_il: f64,
    /// Weight of the chunk-RL term in the hybrid objective.
    pub lambda_rl: f64,
    /// Rewards strictly above this value classify a trajectory as positive.
    pub positive_reward_cutoff: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 0.95,
            mismatch_threshold: 2.0,
            clip_low: 0.0,
            clip_high: 1.0,
            lambda_il: 1.0,
            lambda_rl: 1.0,
            positive_reward_cutoff: 0.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig("gamma must lie in (0, 1]".into()));
        }
        if !(self.mismatch_threshold > 0.0) || !self.mismatch_threshold.is_finite() {
            return Err(Error::InvalidConfig("mismatch_threshold must be positive".into()));
        }
        if self.clip_low > self.clip_high {
            return Err(Error::InvalidConfig("clip_low must not exceed clip_high".into()));
        }
        if self.lambda_il < 0.0 || self.lambda_rl < 0.0 {
            return Err(Error::InvalidConfig("lambda weights must be non-negative".into()));
        }
        if !self.positive_reward_cutoff.is_finite() {
            return Err(Error::InvalidConfig("positive_reward_cutoff must be finite".into()));
        }
        Ok(())
    }

    /// Clamps an importance ratio to the configured interval.
    pub fn clip(&self, rho: f64) -> f64 {
        rho.clamp(self.clip_low, self.clip_high)
    }

    /// Positive/non-positive split of a trajectory by terminal reward.
    pub fn is_positive(&self, traj: &Trajectory) -> bool {
        traj.final_reward > self.positive_reward_cutoff
    }
}

/// Per-chunk credit entries, for inspection and the debug dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCredit {
    /// 1-based chunk index k.
    pub chunk_index: usize,
    /// Discounted return G_k.
    pub discounted_return: f64,
    /// Geometric-mean trainer/trainer-snapshot ratio over the chunk.
    pub chunk_is_ratio: f64,
    /// Mismatch mask m_c.
    pub chunk_mask: bool,
}

/// Geometric mean of per-token likelihood ratios,
/// `exp(mean(logprobs_new - logprobs_old))`; strictly positive.
pub fn geometric_is_ratio(logprobs_new: &[f64], logprobs_old: &[f64]) -> Result<f64> {
    if logprobs_new.len() != logprobs_old.len() {
        return Err(Error::LengthMismatch { left: logprobs_new.len(), right: logprobs_old.len() });
    }
    if logprobs_new.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(mean_log_diff(logprobs_new.iter().zip(logprobs_old).map(|(n, o)| n - o)).exp())
}

fn mean_log_diff(diffs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in diffs {
        sum += d;
        n += 1;
    }
    sum / n as f64
}

/// Token-level mismatch mask: 1 iff the trainer-snapshot/sampler ratio stays
/// at or below `H`. Compared in log space, which is exact at the boundary and
/// monotone-equivalent to `exp(diff) <= H` for positive `H`.
pub fn token_mismatch_mask(trainer_old_logprob: f64, sampler_logprob: f64, h: f64) -> bool {
    trainer_old_logprob - sampler_logprob <= h.ln()
}

/// Chunk-level mismatch mask: 1 iff the geometric mean of the chunk's
/// trainer-snapshot/sampler ratios stays at or below `H`. A chunk can stay
/// unmasked even when some of its tokens individually exceed `H`.
pub fn chunk_mismatch_mask(chunk: &Chunk, traj: &Trajectory, h: f64) -> Result<bool> {
    let flat = flatten_tokens(traj);
    if chunk.end > flat.len() || chunk.is_empty() {
        return Err(Error::BadSegmentation(format!(
            "chunk span {}..{} outside trajectory of {} tokens",
            chunk.start,
            chunk.end,
            flat.len()
        )));
    }
    Ok(chunk_mask_over(&flat[chunk.token_range()], h))
}

fn chunk_mask_over(tokens: &[Token], h: f64) -> bool {
    mean_log_diff(tokens.iter().map(|t| t.trainer_old_logprob - t.sampler_logprob)) <= h.ln()
}

fn chunk_ratio_over(tokens: &[Token]) -> f64 {
    mean_log_diff(tokens.iter().map(|t| t.trainer_logprob - t.trainer_old_logprob)).exp()
}

/// Discounted chunk returns `G_k = gamma^(K - k) * R_final`, computed
/// backward from the terminal chunk so that `G_k == gamma * G_{k+1}` holds
/// bit-exactly.
pub fn chunk_returns(traj: &Trajectory, chunks: &[Chunk], gamma: f64) -> Result<Vec<f64>> {
    verify_segmentation(traj, chunks)?;
    let k = chunks.len();
    let mut returns = vec![0.0; k];
    returns[k - 1] = traj.final_reward;
    for i in (0..k - 1).rev() {
        returns[i] = gamma * returns[i + 1];
    }
    Ok(returns)
}

/// Geometric-mean trainer/trainer-snapshot ratio over the whole trajectory.
pub fn trajectory_is_ratio(traj: &Trajectory) -> Result<f64> {
    let flat = flatten_tokens(traj);
    if flat.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(chunk_ratio_over(&flat))
}

/// The credit table (k, G_k, rho_c, m_c) for one segmented trajectory.
pub fn chunk_credits(traj: &Trajectory, chunks: &[Chunk], cfg: &RlConfig) -> Result<Vec<ChunkCredit>> {
    cfg.validate()?;
    let returns = chunk_returns(traj, chunks, cfg.gamma)?;
    let flat = flatten_tokens(traj);
    Ok(chunks
        .iter()
        .zip(&returns)
        .map(|(chunk, &g)| {
            let span = &flat[chunk.token_range()];
            ChunkCredit {
                chunk_index: chunk.index,
                discounted_return: g,
                chunk_is_ratio: chunk_ratio_over(span),
                chunk_mask: chunk_mask_over(span, cfg.mismatch_threshold),
            }
        })
        .collect())
}

/// Adds `coeff * grad log pi(token | state)` for each selected token of one
/// trajectory, in token order. Shared by every estimator so that equal
/// coefficients produce bit-identical results.
fn accumulate_tokens(
    grad: &mut Array2<f64>,
    policy: &ToyPolicy,
    episode: &Episode,
    selected: impl Iterator<Item = (usize, f64)>, // (flat token position, coefficient)
) -> Result<()> {
    let turn_of = episode.trajectory.turn_of_token();
    let flat = flatten_tokens(&episode.trajectory);
    for (pos, coeff) in selected {
        let token = &flat[pos];
        let state = &episode.states[turn_of[pos]];
        let g = policy.logprob_grad(state, token.id)?;
        grad.zip_mut_with(&g, |acc, &v| *acc += coeff * v);
    }
    Ok(())
}

fn objective_tokens(
    policy: &ToyPolicy,
    episode: &Episode,
    selected: impl Iterator<Item = (usize, f64)>,
) -> Result<f64> {
    let turn_of = episode.trajectory.turn_of_token();
    let flat = flatten_tokens(&episode.trajectory);
    let mut value = 0.0;
    for (pos, coeff) in selected {
        let token = &flat[pos];
        let state = &episode.states[turn_of[pos]];
        value += coeff * policy.logprob(state, token.id)?;
    }
    Ok(value)
}

/// Per-token coefficients of the baseline estimator for one trajectory:
/// `w * R * m_t`, where `w` is 1 for positive trajectories and the clipped
/// trajectory-level geometric ratio for non-positive ones.
fn baseline_coefficients(traj: &Trajectory, cfg: &RlConfig) -> Result<Vec<(usize, f64)>> {
    let flat = flatten_tokens(traj);
    if flat.is_empty() {
        return Err(Error::EmptySequence);
    }
    let weight = if cfg.is_positive(traj) {
        1.0
    } else {
        cfg.clip(trajectory_is_ratio(traj)?)
    };
    let coeff = weight * traj.final_reward;
    Ok(flat
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            token_mismatch_mask(t.trainer_old_logprob, t.sampler_logprob, cfg.mismatch_threshold)
        })
        .map(|(pos, _)| (pos, coeff))
        .collect())
}

/// Baseline off-policy gradient estimate, averaged over the batch.
pub fn baseline_gradient(batch: &[Episode], policy: &ToyPolicy, cfg: &RlConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut grad = Array2::zeros(policy.params().raw_dim());
    for episode in batch {
        let coeffs = baseline_coefficients(&episode.trajectory, cfg)?;
        accumulate_tokens(&mut grad, policy, episode, coeffs.into_iter())?;
    }
    grad.mapv_inplace(|g| g / batch.len() as f64);
    Ok(grad)
}

/// Scalar surrogate whose exact gradient is [`baseline_gradient`]: the same
/// coefficients applied to `log pi` instead of `grad log pi`.
pub fn baseline_objective(batch: &[Episode], policy: &ToyPolicy, cfg: &RlConfig) -> Result<f64> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut value = 0.0;
    for episode in batch {
        let coeffs = baseline_coefficients(&episode.trajectory, cfg)?;
        value += objective_tokens(policy, episode, coeffs.into_iter())?;
    }
    Ok(value / batch.len() as f64)
}

/// Per-token coefficients of the chunk-level estimator for one trajectory,
/// restricted to chunks with index >= `from_chunk` (1-based).
fn chunk_coefficients(
    traj: &Trajectory,
    chunks: &[Chunk],
    from_chunk: usize,
    cfg: &RlConfig,
) -> Result<Vec<(usize, f64)>> {
    verify_segmentation(traj, chunks)?;
    let returns = chunk_returns(traj, chunks, cfg.gamma)?;
    let flat = flatten_tokens(traj);
    let positive = cfg.is_positive(traj);
    let mut coeffs = Vec::new();
    for (chunk, &g) in chunks.iter().zip(&returns) {
        if chunk.index < from_chunk {
            continue;
        }
        let span = &flat[chunk.token_range()];
        if !chunk_mask_over(span, cfg.mismatch_threshold) {
            continue;
        }
        let weight = if positive { 1.0 } else { cfg.clip(chunk_ratio_over(span)) };
        let coeff = weight * g;
        coeffs.extend(chunk.token_range().map(|pos| (pos, coeff)));
    }
    Ok(coeffs)
}

/// Chunk-level policy gradient, averaged over the batch: each chunk's tokens
/// are weighted by `G_k * m_c`, with the clipped chunk-level geometric ratio
/// applied on non-positive trajectories.
pub fn chunk_rl_gradient(
    batch: &[Episode],
    chunks_per_traj: &[Vec<Chunk>],
    policy: &ToyPolicy,
    cfg: &RlConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    if batch.len() != chunks_per_traj.len() {
        return Err(Error::LengthMismatch { left: batch.len(), right: chunks_per_traj.len() });
    }
    let mut grad = Array2::zeros(policy.params().raw_dim());
    for (episode, chunks) in batch.iter().zip(chunks_per_traj) {
        let coeffs = chunk_coefficients(&episode.trajectory, chunks, 1, cfg)?;
        accumulate_tokens(&mut grad, policy, episode, coeffs.into_iter())?;
    }
    grad.mapv_inplace(|g| g / batch.len() as f64);
    Ok(grad)
}

/// Scalar surrogate whose exact gradient is [`chunk_rl_gradient`].
pub fn chunk_rl_objective(
    batch: &[Episode],
    chunks_per_traj: &[Vec<Chunk>],
    policy: &ToyPolicy,
    cfg: &RlConfig,
) -> Result<f64> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    if batch.len() != chunks_per_traj.len() {
        return Err(Error::LengthMismatch { left: batch.len(), right: chunks_per_traj.len() });
    }
    let mut value = 0.0;
    for (episode, chunks) in batch.iter().zip(chunks_per_traj) {
        let coeffs = chunk_coefficients(&episode.trajectory, chunks, 1, cfg)?;
        value += objective_tokens(policy, episode, coeffs.into_iter())?;
    }
    Ok(value / batch.len() as f64)
}

/// A leading slice of an expert trajectory used for imitation: chunks
/// `1..=prefix_chunks`, where chunk `prefix_chunks` is the crucial chunk `f`.
/// `prefix_chunks == 0` means no expert prefix at all.
#[derive(Debug, Clone, Copy)]
pub struct ExpertPrefix<'a> {
    pub episode: &'a Episode,
    pub chunks: &'a [Chunk],
    pub prefix_chunks: usize,
}

impl<'a> ExpertPrefix<'a> {
    pub fn empty(episode: &'a Episode, chunks: &'a [Chunk]) -> Self {
        ExpertPrefix { episode, chunks, prefix_chunks: 0 }
    }

    fn validate(&self) -> Result<()> {
        verify_segmentation(&self.episode.trajectory, self.chunks)?;
        if self.prefix_chunks > self.chunks.len() {
            return Err(Error::PrefixMismatch(format!(
                "prefix of {} chunks exceeds the expert's {}",
                self.prefix_chunks,
                self.chunks.len()
            )));
        }
        Ok(())
    }
}

/// Checks that the resampled trajectory literally replays the expert's first
/// `replayed` chunks (identical token ids over identical spans).
fn check_replayed_prefix(
    prefix: &ExpertPrefix,
    resampled: &Trajectory,
    resampled_chunks: &[Chunk],
    replayed: usize,
) -> Result<()> {
    if resampled_chunks.len() < replayed {
        return Err(Error::PrefixMismatch(format!(
            "resampled trajectory has {} chunks, fewer than the {} replayed",
            resampled_chunks.len(),
            replayed
        )));
    }
    let expert_flat = flatten_tokens(&prefix.episode.trajectory);
    let resampled_flat = flatten_tokens(resampled);
    for i in 0..replayed {
        let e = &prefix.chunks[i];
        let r = &resampled_chunks[i];
        if e.token_range() != r.token_range() {
            return Err(Error::PrefixMismatch(format!(
                "chunk {} spans differ: {}..{} vs {}..{}",
                i + 1,
                e.start,
                e.end,
                r.start,
                r.end
            )));
        }
        let same = e
            .token_range()
            .all(|pos| expert_flat[pos].id == resampled_flat[pos].id);
        if !same {
            return Err(Error::PrefixMismatch(format!("chunk {} token ids differ", i + 1)));
        }
    }
    Ok(())
}

/// Imitation coefficients over the expert prefix: `G_k` per token of expert
/// chunks `1..=prefix_chunks`, scaled by `scale`.
fn imitation_coefficients(prefix: &ExpertPrefix, cfg: &RlConfig, scale: f64) -> Result<Vec<(usize, f64)>> {
    if prefix.prefix_chunks == 0 {
        return Ok(Vec::new());
    }
    let returns = chunk_returns(&prefix.episode.trajectory, prefix.chunks, cfg.gamma)?;
    let mut coeffs = Vec::new();
    for (chunk, &g) in prefix.chunks.iter().zip(&returns).take(prefix.prefix_chunks) {
        let coeff = scale * g;
        coeffs.extend(chunk.token_range().map(|pos| (pos, coeff)));
    }
    Ok(coeffs)
}

/// Hybrid imitation + chunk-RL gradient for one resampled trajectory:
///
/// `lambda_il * sum_{k <= f} G_k grad log pi(expert chunk k)`
/// `+ lambda_rl * (chunk-level gradient of the resampled trajectory,`
/// `               restricted to chunks >= f)`,
///
/// where `f = prefix_chunks` (or 1 when the prefix is empty). The resampled
/// trajectory must replay the expert's first `f - 1` chunks verbatim.
pub fn ipa_loss_gradient(
    prefix: &ExpertPrefix,
    resampled: &Episode,
    resampled_chunks: &[Chunk],
    policy: &ToyPolicy,
    cfg: &RlConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    prefix.validate()?;
    verify_segmentation(&resampled.trajectory, resampled_chunks)?;
    let replayed = prefix.prefix_chunks.saturating_sub(1);
    check_replayed_prefix(prefix, &resampled.trajectory, resampled_chunks, replayed)?;

    let mut grad = Array2::zeros(policy.params().raw_dim());
    let il = imitation_coefficients(prefix, cfg, cfg.lambda_il)?;
    accumulate_tokens(&mut grad, policy, prefix.episode, il.into_iter())?;

    let from_chunk = prefix.prefix_chunks.max(1);
    let rl = chunk_coefficients(&resampled.trajectory, resampled_chunks, from_chunk, cfg)?;
    let rl_scaled = rl.into_iter().map(|(pos, c)| (pos, cfg.lambda_rl * c));
    accumulate_tokens(&mut grad, policy, resampled, rl_scaled)?;
    Ok(grad)
}

/// Scalar surrogate whose exact gradient is [`ipa_loss_gradient`].
pub fn ipa_objective(
    prefix: &ExpertPrefix,
    resampled: &Episode,
    resampled_chunks: &[Chunk],
    policy: &ToyPolicy,
    cfg: &RlConfig,
) -> Result<f64> {
    cfg.validate()?;
    prefix.validate()?;
    verify_segmentation(&resampled.trajectory, resampled_chunks)?;
    let replayed = prefix.prefix_chunks.saturating_sub(1);
    check_replayed_prefix(prefix, &resampled.trajectory, resampled_chunks, replayed)?;

    let il = imitation_coefficients(prefix, cfg, cfg.lambda_il)?;
    let mut value = objective_tokens(policy, prefix.episode, il.into_iter())?;
    let from_chunk = prefix.prefix_chunks.max(1);
    let rl = chunk_coefficients(&resampled.trajectory, resampled_chunks, from_chunk, cfg)?;
    value += objective_tokens(
        policy,
        resampled,
        rl.into_iter().map(|(pos, c)| (pos, cfg.lambda_rl * c)),
    )?;
    Ok(value)
}

/// Writes a named-field debug dump: the parameter gradient plus one credit
/// table per trajectory.
pub fn write_gradient_dump<W: Write>(
    mut w: W,
    grad: &Array2<f64>,
    credit_tables: &[Vec<ChunkCredit>],
) -> Result<()> {
    writeln!(w, "gradient-dump v1")?;
    writeln!(w, "rows {}", grad.nrows())?;
    writeln!(w, "cols {}", grad.ncols())?;
    for row in grad.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "grad {}", cells.join(" "))?;
    }
    for (i, table) in credit_tables.iter().enumerate() {
        for credit in table {
            writeln!(
                w,
                "chunk traj={} k={} G={} rho={} mask={}",
                i,
                credit.chunk_index,
                credit.discounted_return,
                credit.chunk_is_ratio,
                u8::from(credit.chunk_mask)
            )?;
        }
    }
    Ok(())
}

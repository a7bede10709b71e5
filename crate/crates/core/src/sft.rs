//! Dynamically masked supervised fine-tuning.
//!
//! The loss over a multi-turn trajectory is a length-normalized negative
//! log-likelihood where each turn is gated by a binary mask
//! `m_k = m_k_err * m_k_task`: the turn must be error-free (as recorded by
//! execution feedback) and task-relevant (as decided by a configurable
//! heuristic). Masked turns contribute to neither the numerator nor the
//! token-count denominator, so supervision comes only from executable,
//! causally relevant interactions.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::policy::ToyPolicy;
use crate::rollout::Episode;
use crate::trajectory::Trajectory;

/// Heuristic realizing the task-relevance predicate.
///
/// `ToolProximity { window }` marks as relevant every turn within `window`
/// turns before a tool-calling turn, the tool-calling turn itself, and any
/// trailing turns after the last tool call (the final answer). Trajectories
/// with no tool calls are entirely relevant under this rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelevanceRule {
    AllRelevant,
    ToolProximity { window: usize },
}

/// Masking configuration: the numerical-stability constant and the relevance
/// heuristic. Error flags are always read from the trajectory; the loss never
/// re-derives them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftMaskConfig {
    pub epsilon: f64,
    pub relevance_rule: RelevanceRule,
}

impl Default for SftMaskConfig {
    fn default() -> Self {
        SftMaskConfig { epsilon: 1e-8, relevance_rule: RelevanceRule::AllRelevant }
    }
}

impl SftMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig("epsilon must be a finite positive real".into()));
        }
        Ok(())
    }
}

fn relevance(traj: &Trajectory, rule: RelevanceRule) -> Vec<bool> {
    let n = traj.turns.len();
    match rule {
        RelevanceRule::AllRelevant => vec![true; n],
        RelevanceRule::ToolProximity { window } => {
            let mut relevant = vec![false; n];
            let last_tool = traj.turns.iter().rposition(|t| t.ends_with_tool_call);
            for (j, turn) in traj.turns.iter().enumerate() {
                if turn.ends_with_tool_call {
                    let from = j.saturating_sub(window);
                    for slot in &mut relevant[from..=j] {
                        *slot = true;
                    }
                }
            }
            match last_tool {
                Some(j) => {
                    for slot in &mut relevant[j + 1..] {
                        *slot = true;
                    }
                }
                // No tool calls at all: nothing to be proximate to, keep all.
                None => relevant.fill(true),
            }
            relevant
        }
    }
}

/// Per-turn mask `m_k = (1 - err_k) * rel_k`, with relevance computed by the
/// configured rule. Pure function of its inputs.
pub fn turn_masks(traj: &Trajectory, cfg: &SftMaskConfig) -> Vec<u8> {
    relevance(traj, cfg.relevance_rule)
        .into_iter()
        .zip(&traj.turns)
        .map(|(rel, turn)| u8::from(rel && !turn.error_flag))
        .collect()
}

/// Masked, length-normalized negative log-likelihood:
/// `-(sum_k m_k sum_{t in turn k} log pi(t)) / (sum_k m_k |turn k| + eps)`.
///
/// Log-probabilities are recomputed from `policy` at the episode's recorded
/// states, so the loss is differentiable in the parameters. A fully masked
/// trajectory yields exactly 0.
pub fn sft_loss(episode: &Episode, policy: &ToyPolicy, cfg: &SftMaskConfig) -> Result<f64> {
    cfg.validate()?;
    let masks = turn_masks(&episode.trajectory, cfg);
    let mut numerator = 0.0;
    let mut token_count = 0.0;
    for ((turn, state), &mask) in episode.trajectory.turns.iter().zip(&episode.states).zip(&masks) {
        if mask == 0 {
            continue;
        }
        let log_probs = policy.log_probs(state)?;
        for token in &turn.tokens {
            if (token.id as usize) >= log_probs.len() {
                return Err(Error::ActionOutOfRange { action: token.id, vocab: log_probs.len() });
            }
            numerator += log_probs[token.id as usize];
        }
        token_count += turn.tokens.len() as f64;
    }
    Ok(-numerator / (token_count + cfg.epsilon))
}

/// Exact parameter gradient of [`sft_loss`]. Masked turns contribute nothing.
pub fn sft_loss_grad(episode: &Episode, policy: &ToyPolicy, cfg: &SftMaskConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let masks = turn_masks(&episode.trajectory, cfg);
    let mut grad = Array2::zeros(policy.params().raw_dim());
    let mut token_count = 0.0;
    for ((turn, state), &mask) in episode.trajectory.turns.iter().zip(&episode.states).zip(&masks) {
        if mask == 0 {
            continue;
        }
        for token in &turn.tokens {
            grad += &policy.logprob_grad(state, token.id)?;
        }
        token_count += turn.tokens.len() as f64;
    }
    grad.mapv_inplace(|g| -g / (token_count + cfg.epsilon));
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::turn_features;
    use crate::trajectory::{Token, Turn};
    use ndarray::Array2;

    fn turn(ids: &[u32], tool: bool, error: bool) -> Turn {
        let tokens = ids.iter().map(|&id| Token::on_policy(id, -1.0)).collect();
        let mut t = Turn::new(tokens, tool);
        if tool {
            t = t.with_observation(b"ok".to_vec());
        }
        t.with_error(error)
    }

    fn episode(turns: Vec<Turn>, dim: usize) -> Episode {
        let traj = Trajectory::new(turns, 1.0, 0, None).unwrap();
        Episode::from_positional(traj, dim).unwrap()
    }

    #[test]
    fn error_turn_is_masked_out() {
        let traj = Trajectory::new(
            vec![turn(&[0], true, false), turn(&[1], true, true), turn(&[0], false, false)],
            1.0,
            0,
            None,
        )
        .unwrap();
        let cfg = SftMaskConfig::default();
        assert_eq!(turn_masks(&traj, &cfg), vec![1, 0, 1]);
    }

    #[test]
    fn clean_relevant_turns_are_all_ones() {
        let traj = Trajectory::new(vec![turn(&[0], true, false), turn(&[1], false, false)], 1.0, 0, None)
            .unwrap();
        assert_eq!(turn_masks(&traj, &SftMaskConfig::default()), vec![1, 1]);
    }

    #[test]
    fn tool_proximity_window_marks_expected_turns() {
        // Five turns; the only tool call is at turn 4 (1-based). With a
        // window of 1, turns 3 and 4 are proximate and turn 5 trails the last
        // tool call, so turns 3, 4, 5 are relevant.
        let turns = vec![
            turn(&[0], false, false),
            turn(&[0], false, false),
            turn(&[0], false, false),
            turn(&[0], true, false),
            turn(&[0], false, false),
        ];
        let traj = Trajectory::new(turns, 1.0, 0, None).unwrap();
        let cfg = SftMaskConfig {
            epsilon: 1e-8,
            relevance_rule: RelevanceRule::ToolProximity { window: 1 },
        };
        assert_eq!(turn_masks(&traj, &cfg), vec![0, 0, 1, 1, 1]);
    }

    #[test]
    fn all_masks_zero_gives_zero_loss() {
        let ep = episode(vec![turn(&[0], true, true), turn(&[1], true, true)], 4);
        let policy = ToyPolicy::zeros(4, 3).unwrap();
        let loss = sft_loss(&ep, &policy, &SftMaskConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_unmasked_turn_with_unit_logprobs() {
        // One turn of 3 tokens, each with log-probability exactly -1 under a
        // two-action policy with logits (0, ln(e - 1)) at the bias feature.
        let mut params = Array2::zeros((2, 2));
        params[(1, 1)] = (std::f64::consts::E - 1.0).ln();
        let policy = ToyPolicy::new(params).unwrap();
        let ep = episode(vec![turn(&[0, 0, 0], false, false)], 2);
        let cfg = SftMaskConfig::default();
        let loss = sft_loss(&ep, &policy, &cfg).unwrap();
        assert!((loss - 3.0 / (3.0 + 1e-8)).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_matches_brute_force_token_sum() {
        let policy = ToyPolicy::random(5, 4, 1.2, 31).unwrap();
        let turns = vec![
            turn(&[1, 2], true, false),
            turn(&[0], true, true),
            turn(&[3, 1, 0], true, false),
            turn(&[2], false, false),
        ];
        let ep = episode(turns, 5);
        let cfg = SftMaskConfig::default();
        let loss = sft_loss(&ep, &policy, &cfg).unwrap();

        // Independent summation oracle: per-token logprob calls, hand mask.
        let masks = [1.0, 0.0, 1.0, 1.0];
        let mut num = 0.0;
        let mut denom = 0.0;
        for (k, t) in ep.trajectory.turns.iter().enumerate() {
            let x = turn_features(k, 5);
            for tok in &t.tokens {
                num += masks[k] * policy.logprob(&x, tok.id).unwrap();
            }
            denom += masks[k] * t.tokens.len() as f64;
        }
        let expected = -num / (denom + cfg.epsilon);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_gradient_is_zero() {
        let ep = episode(vec![turn(&[0], true, true)], 3);
        let policy = ToyPolicy::random(3, 3, 1.0, 2).unwrap();
        let grad = sft_loss_grad(&ep, &policy, &SftMaskConfig::default()).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let policy = ToyPolicy::random(4, 3, 0.8, 13).unwrap();
        let turns = vec![turn(&[1, 0], true, false), turn(&[2], true, true), turn(&[0, 1], false, false)];
        let ep = episode(turns, 4);
        let cfg = SftMaskConfig::default();
        let grad = sft_loss_grad(&ep, &policy, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = policy.params().clone();
                plus[(i, j)] += h;
                let mut minus = policy.params().clone();
                minus[(i, j)] -= h;
                let fd = (sft_loss(&ep, &ToyPolicy::new(plus).unwrap(), &cfg).unwrap()
                    - sft_loss(&ep, &ToyPolicy::new(minus).unwrap(), &cfg).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(1e-8);
                assert!((grad[(i, j)] - fd).abs() / denom < 1e-6, "({i},{j}): {} vs {fd}", grad[(i, j)]);
            }
        }
    }

    #[test]
    fn masked_turn_tokens_do_not_influence_loss_or_grad() {
        let policy = ToyPolicy::random(4, 4, 1.0, 5).unwrap();
        let cfg = SftMaskConfig::default();
        let base = episode(
            vec![turn(&[1], true, false), turn(&[2, 2], true, true), turn(&[3], false, false)],
            4,
        );
        let mut perturbed = base.clone();
        for tok in &mut perturbed.trajectory.turns[1].tokens {
            tok.id = 0;
        }
        assert_eq!(
            sft_loss(&base, &policy, &cfg).unwrap(),
            sft_loss(&perturbed, &policy, &cfg).unwrap()
        );
        assert_eq!(
            sft_loss_grad(&base, &policy, &cfg).unwrap(),
            sft_loss_grad(&perturbed, &policy, &cfg).unwrap()
        );
    }

    #[test]
    fn gradient_equals_gradient_with_masked_turns_deleted() {
        // Masked turns contribute nothing, so deleting them (with their
        // states) leaves loss and gradient unchanged.
        let policy = ToyPolicy::random(4, 3, 0.7, 23).unwrap();
        let cfg = SftMaskConfig::default();
        let full = episode(
            vec![turn(&[1], true, false), turn(&[0, 2], true, true), turn(&[2], false, false)],
            4,
        );
        let mut kept_turns = full.trajectory.turns.clone();
        kept_turns.remove(1);
        let mut kept_states = full.states.clone();
        kept_states.remove(1);
        let reduced = Episode::new(
            Trajectory::new(kept_turns, full.trajectory.final_reward, 0, None).unwrap(),
            kept_states,
        )
        .unwrap();
        assert_eq!(
            sft_loss(&full, &policy, &cfg).unwrap(),
            sft_loss(&reduced, &policy, &cfg).unwrap()
        );
        assert_eq!(
            sft_loss_grad(&full, &policy, &cfg).unwrap(),
            sft_loss_grad(&reduced, &policy, &cfg).unwrap()
        );
    }

    #[test]
    fn duplicating_unmasked_turns_preserves_loss_up_to_epsilon() {
        let policy = ToyPolicy::random(5, 3, 0.5, 41).unwrap();
        let cfg = SftMaskConfig { epsilon: 1e-8, relevance_rule: RelevanceRule::AllRelevant };
        let turns = vec![
            turn(&[1, 2, 0, 1, 2], true, false),
            turn(&[0], true, true),
            turn(&[2, 0, 1, 0, 2], true, false),
            turn(&[1, 1], false, false),
        ];
        let ep = episode(turns.clone(), 5);
        let loss = sft_loss(&ep, &policy, &cfg).unwrap();

        // Duplicate each unmasked turn in place, reusing the same state.
        let mut doubled_turns = Vec::new();
        let mut doubled_states = Vec::new();
        for (k, t) in turns.iter().enumerate() {
            doubled_turns.push(t.clone());
            doubled_states.push(ep.states[k].clone());
            if !t.error_flag {
                doubled_turns.push(t.clone());
                doubled_states.push(ep.states[k].clone());
            }
        }
        let doubled = Episode::new(
            Trajectory::new(doubled_turns, 1.0, 0, None).unwrap(),
            doubled_states,
        )
        .unwrap();
        let loss2 = sft_loss(&doubled, &policy, &cfg).unwrap();
        assert!((loss - loss2).abs() < 1e-9, "{loss} vs {loss2}");
    }

    #[test]
    fn loss_is_non_negative() {
        for seed in 0..10 {
            let policy = ToyPolicy::random(4, 4, 1.5, seed).unwrap();
            let ep = episode(vec![turn(&[1, 3], true, false), turn(&[0], false, false)], 4);
            assert!(sft_loss(&ep, &policy, &SftMaskConfig::default()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn invalid_epsilon_rejected() {
        let cfg = SftMaskConfig { epsilon: 0.0, relevance_rule: RelevanceRule::AllRelevant };
        let ep = episode(vec![turn(&[0], false, false)], 3);
        let policy = ToyPolicy::zeros(3, 2).unwrap();
        assert!(sft_loss(&ep, &policy, &cfg).is_err());
    }
}

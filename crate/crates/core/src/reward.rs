//! Judge-derived rewards: the gold word's probability under the judge given a
//! trajectory, minus a scaled L1 distance to the judge's reading of the raw
//! context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{next_token_distribution, LanguageModel, TokenDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub judge_temperature: f64,
    pub top_k: usize,
    pub alpha: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            judge_temperature: 5.0,
            top_k: 100,
            alpha: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.judge_temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.judge_temperature));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub base: f64,
    pub penalty: f64,
    pub reward: f64,
    /// 1-based rank of the gold token under the trajectory distribution.
    pub gold_rank: Option<usize>,
}

pub fn judge_distribution<J: LanguageModel + ?Sized>(
    judge: &J,
    input: &[usize],
    temperature: f64,
) -> Result<TokenDistribution> {
    if input.is_empty() {
        return Err(Error::InvalidArgument("judge input must be non-empty".into()));
    }
    next_token_distribution(judge, input, temperature)
}

/// `(dist[gold], rank)` if gold is among the `min(k, |V|)` most probable
/// tokens, else `(0, rank)`.
pub fn base_reward(dist: &TokenDistribution, gold: usize, k: usize) -> Result<(f64, usize)> {
    let rank = dist.rank_of(gold).ok_or(Error::GoldOutOfVocabulary(gold))?;
    let reward = if rank <= k.min(dist.len()) { dist.prob(gold) } else { 0.0 };
    Ok((reward, rank))
}

/// L1 distance restricted to the reference's top `min(k, |V|)` tokens, without
/// renormalizing either side.
pub fn l1_penalty(dist: &TokenDistribution, reference: &TokenDistribution, k: usize) -> f64 {
    reference
        .top_k(k)
        .into_iter()
        .map(|w| (dist.prob(w) - reference.prob(w)).abs())
        .sum()
}

/// Combines precomputed trajectory and reference distributions.
pub fn reward_from_distributions(
    dist: &TokenDistribution,
    reference: &TokenDistribution,
    gold: usize,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    if dist.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            expected: reference.len(),
            actual: dist.len(),
        });
    }
    let (base, rank) = base_reward(dist, gold, cfg.top_k)?;
    let penalty = l1_penalty(dist, reference, cfg.top_k);
    Ok(RewardBreakdown {
        base,
        penalty,
        reward: base - cfg.alpha * penalty,
        gold_rank: Some(rank),
    })
}

pub fn final_reward<J: LanguageModel + ?Sized>(
    judge: &J,
    trajectory: &[usize],
    context: &[usize],
    gold: usize,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    cfg.validate()?;
    let dist = judge_distribution(judge, trajectory, cfg.judge_temperature)?;
    let reference = judge_distribution(judge, context, cfg.judge_temperature)?;
    reward_from_distributions(&dist, &reference, gold, cfg)
}

/// What the judge reads for a sampled trajectory: the reasoning marker
/// followed by the trajectory body (stop token removed).
pub fn judge_input(body: &[usize], opener: usize) -> Vec<usize> {
    let mut input = Vec::with_capacity(body.len() + 1);
    input.push(opener);
    input.extend_from_slice(body);
    input
}

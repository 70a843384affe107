//! Sampling groups of reasoning trajectories from the policy.
//!
//! The policy is conditioned on `context ++ [<reason>]` only. The gold word is
//! stored on the group for the reward stage and never reaches a prompt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::lm::{next_token_distribution, sample_from, LanguageModel, TokenSequence, Vocabulary};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub group_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub stop: usize,
    pub reason_start: usize,
}

impl SamplingConfig {
    /// Group size 5, at most 16 tokens, temperature 1.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        SamplingConfig {
            group_size: 5,
            max_len: 16,
            temperature: 1.0,
            stop: vocab.eos(),
            reason_start: vocab.reason_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max trajectory length must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: TokenSequence,
    /// Per-token log-probabilities under the policy that generated them.
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Tokens with a trailing stop token removed.
    pub fn body(&self, stop: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == stop => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub context: TokenSequence,
    pub gold: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Stores rewards and the standardized advantages derived from them.
    pub fn assign_rewards(&mut self, rewards: Vec<f64>, sigma_floor: f64) -> Result<()> {
        if rewards.len() != self.trajectories.len() {
            return Err(Error::ShapeMismatch {
                expected: self.trajectories.len(),
                actual: rewards.len(),
            });
        }
        let (mean, std) = crate::grpo::population_stats(&rewards);
        self.advantages = crate::grpo::compute_advantages(&rewards, sigma_floor)?;
        self.mean = mean;
        self.std = std;
        self.rewards = rewards;
        Ok(())
    }
}

/// The conditioning sequence for a rollout.
pub fn build_prompt(context: &[usize], reason_start: usize) -> Vec<usize> {
    let mut prompt = Vec::with_capacity(context.len() + 1);
    prompt.extend_from_slice(context);
    prompt.push(reason_start);
    prompt
}

pub fn sample_trajectory<M, R>(policy: &M, context: &[usize], cfg: &SamplingConfig, rng: &mut R) -> Result<Trajectory>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if context.is_empty() {
        return Err(Error::InvalidArgument("context must be non-empty".into()));
    }
    let mut history = build_prompt(context, cfg.reason_start);
    let mut tokens = Vec::with_capacity(cfg.max_len);
    let mut log_probs = Vec::with_capacity(cfg.max_len);
    while tokens.len() < cfg.max_len {
        let dist = next_token_distribution(policy, &history, cfg.temperature)?;
        let tok = sample_from(&dist, rng);
        tokens.push(tok);
        log_probs.push(dist.prob(tok).ln());
        history.push(tok);
        if tok == cfg.stop {
            break;
        }
    }
    Ok(Trajectory {
        tokens: TokenSequence(tokens),
        log_probs,
    })
}

/// Samples `cfg.group_size` trajectories; member `i` draws from the stream
/// `(seed, path.., i)`.
pub fn sample_group<M>(
    policy: &M,
    context: &[usize],
    gold: usize,
    cfg: &SamplingConfig,
    seed: u64,
    path: &[u64],
    mode: ExecMode,
) -> Result<RolloutGroup>
where
    M: LanguageModel + ?Sized,
{
    cfg.validate()?;
    let trajectories = exec::try_map_indexed(mode, cfg.group_size, |i| {
        let mut member_path = path.to_vec();
        member_path.push(i as u64);
        sample_trajectory(policy, context, cfg, &mut rng::stream(seed, &member_path))
    })?;
    Ok(RolloutGroup {
        context: TokenSequence(context.to_vec()),
        gold,
        trajectories,
        rewards: Vec::new(),
        mean: 0.0,
        std: 0.0,
        advantages: Vec::new(),
    })
}

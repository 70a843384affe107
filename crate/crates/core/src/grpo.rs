//! Group-relative policy optimization with a clipped surrogate and no KL term.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ContextTargetPair;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::eval::{no_judge_reward, slm_loss};
use crate::lm::{next_token_distribution, LanguageModel, LogLinearModel, RowSparseGrad};
use crate::reward::{judge_distribution, judge_input, reward_from_distributions, RewardBreakdown, RewardConfig};
use crate::rng;
use crate::rollout::{build_prompt, sample_group, RolloutGroup, SamplingConfig, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_eps: f64,
    /// Passes over each rollout batch before new trajectories are drawn.
    pub ppo_epochs: usize,
    /// Contexts per rollout batch.
    pub batch_size: usize,
    /// Contexts per optimizer step.
    pub minibatch_size: usize,
    pub group_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sigma_floor: f64,
    pub entropy_coef: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            clip_eps: 0.2,
            ppo_epochs: 1,
            batch_size: 64,
            minibatch_size: 16,
            group_size: 5,
            epochs: 1,
            seed: 0,
            sigma_floor: 1e-8,
            entropy_coef: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) || !(self.sigma_floor >= 0.0) {
            return bad("weight_decay, adam_eps and sigma_floor must be non-negative".into());
        }
        if !self.entropy_coef.is_finite() {
            return bad("entropy_coef must be finite".into());
        }
        if self.minibatch_size == 0 || self.batch_size == 0 || self.batch_size % self.minibatch_size != 0 {
            return bad(format!(
                "minibatch_size {} must divide batch_size {}",
                self.minibatch_size, self.batch_size
            ));
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs must be at least 1".into());
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_base: f64,
    pub mean_penalty: f64,
    pub mean_abs_advantage: f64,
    pub clipped_fraction: f64,
    pub grad_norm: f64,
    pub entropy: f64,
}

/// Population mean and standard deviation.
pub fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn compute_advantages(rewards: &[f64], sigma_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = population_stats(rewards);
    if std < sigma_floor || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)` with `ρ = exp(new − old)`.
pub fn clipped_surrogate(old_log_prob: f64, new_log_prob: f64, advantage: f64, clip_eps: f64) -> f64 {
    let ratio = (new_log_prob - old_log_prob).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// AdamW update on `weights` given the gradient of the loss being minimized.
pub fn optimizer_step(weights: &mut [f64], state: &mut OptimizerState, grad: &[f64], cfg: &TrainConfig) -> Result<()> {
    for len in [grad.len(), state.m.len(), state.v.len()] {
        if len != weights.len() {
            return Err(Error::ShapeMismatch {
                expected: weights.len(),
                actual: len,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..weights.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] = weights[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// One trajectory's contribution to a mini-batch.
#[derive(Debug, Clone)]
pub struct SurrogateItem {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// The mini-batch loss is exactly these two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Negated mean clipped surrogate.
    pub surrogate: f64,
    /// Negated `entropy_coef` times mean per-token policy entropy.
    pub entropy_bonus: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.surrogate + self.entropy_bonus
    }
}

#[derive(Debug, Clone)]
pub struct MinibatchEval {
    pub terms: LossTerms,
    pub grad: Vec<f64>,
    pub clipped: usize,
    pub mean_entropy: f64,
}

struct ItemEval {
    surrogate: f64,
    clipped: bool,
    entropy: f64,
    grad: RowSparseGrad,
}

fn eval_item(
    policy: &LogLinearModel,
    item: &SurrogateItem,
    scale: f64,
    temperature: f64,
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<ItemEval> {
    let mut grad = policy.sparse_grad();
    let mut history = item.prompt.clone();
    let mut new_log_prob = 0.0;
    let mut entropy = 0.0;
    for &tok in &item.tokens {
        let dist = next_token_distribution(policy, &history, temperature)?;
        new_log_prob += dist.prob(tok).ln();
        entropy += dist.entropy();
        history.push(tok);
    }
    let len = item.tokens.len().max(1) as f64;
    entropy /= len;
    let ratio = (new_log_prob - item.old_log_prob).exp();
    let surrogate = clipped_surrogate(item.old_log_prob, new_log_prob, item.advantage, clip_eps);
    let clipped = !(1.0 - clip_eps..=1.0 + clip_eps).contains(&ratio);
    let flows = ratio * item.advantage <= ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * item.advantage;
    let g_scale = if flows { -scale * item.advantage * ratio } else { 0.0 };
    let mut history = item.prompt.clone();
    for &tok in &item.tokens {
        if g_scale != 0.0 {
            policy.accumulate_grad_log_prob(&history, tok, temperature, g_scale, &mut grad)?;
        }
        if entropy_coef != 0.0 {
            policy.accumulate_entropy_grad(&history, temperature, -scale * entropy_coef / len, &mut grad)?;
        }
        history.push(tok);
    }
    Ok(ItemEval {
        surrogate,
        clipped,
        entropy,
        grad,
    })
}

/// Loss and analytic gradient for one mini-batch. Per-item gradients are
/// summed in item order.
pub fn minibatch_loss_and_grad(
    policy: &LogLinearModel,
    items: &[SurrogateItem],
    temperature: f64,
    clip_eps: f64,
    entropy_coef: f64,
    mode: ExecMode,
) -> Result<MinibatchEval> {
    if items.is_empty() {
        return Err(Error::EmptySelection);
    }
    let scale = 1.0 / items.len() as f64;
    let evals = exec::try_map_indexed(mode, items.len(), |i| {
        eval_item(policy, &items[i], scale, temperature, clip_eps, entropy_coef)
    })?;
    let mut grad = vec![0.0; policy.weights().len()];
    let (mut surr, mut ent, mut clipped) = (0.0, 0.0, 0);
    for e in &evals {
        e.grad.add_into(&mut grad);
        surr += e.surrogate;
        ent += e.entropy;
        clipped += e.clipped as usize;
    }
    let mean_entropy = ent * scale;
    Ok(MinibatchEval {
        terms: LossTerms {
            surrogate: -surr * scale,
            entropy_bonus: -entropy_coef * mean_entropy,
        },
        grad,
        clipped,
        mean_entropy,
    })
}

/// A scored group ready for optimization.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub breakdowns: Vec<RewardBreakdown>,
}

/// Assigns a scalar reward to every trajectory in a group.
pub trait Scorer: Sync {
    fn score(&self, pair: &ContextTargetPair, trajectories: &[Trajectory]) -> Result<Vec<RewardBreakdown>>;
}

/// Rewards trajectories by how well the frozen judge predicts the gold word after them.
pub struct JudgeScorer<'a, J: ?Sized> {
    pub judge: &'a J,
    pub reward: RewardConfig,
    pub reason_start: usize,
    pub stop: usize,
}

impl<'a, J: LanguageModel + Sync + ?Sized> JudgeScorer<'a, J> {
    pub fn new(judge: &'a J, reward: RewardConfig, sampling: &SamplingConfig) -> Result<Self> {
        reward.validate()?;
        Ok(JudgeScorer {
            judge,
            reward,
            reason_start: sampling.reason_start,
            stop: sampling.stop,
        })
    }
}

impl<J: LanguageModel + Sync + ?Sized> Scorer for JudgeScorer<'_, J> {
    fn score(&self, pair: &ContextTargetPair, trajectories: &[Trajectory]) -> Result<Vec<RewardBreakdown>> {
        let reference = judge_distribution(self.judge, &pair.context, self.reward.judge_temperature)?;
        trajectories
            .iter()
            .map(|t| {
                let input = judge_input(t.body(self.stop), self.reason_start);
                let dist = judge_distribution(self.judge, &input, self.reward.judge_temperature)?;
                reward_from_distributions(&dist, &reference, pair.gold, &self.reward)
            })
            .collect()
    }
}

/// Exact-match reward on the boxed answer, used by the judge-free baseline.
pub struct NoJudgeScorer {
    pub box_open: usize,
}

impl Scorer for NoJudgeScorer {
    fn score(&self, pair: &ContextTargetPair, trajectories: &[Trajectory]) -> Result<Vec<RewardBreakdown>> {
        Ok(trajectories
            .iter()
            .map(|t| {
                let r = no_judge_reward(&t.tokens, pair.gold, self.box_open);
                RewardBreakdown {
                    base: r,
                    penalty: 0.0,
                    reward: r,
                    gold_rank: None,
                }
            })
            .collect())
    }
}

/// Samples and scores one group with the given (old) policy.
#[allow(clippy::too_many_arguments)]
pub fn rollout_and_score<S: Scorer + ?Sized>(
    policy: &LogLinearModel,
    scorer: &S,
    pair: &ContextTargetPair,
    sampling: &SamplingConfig,
    sigma_floor: f64,
    seed: u64,
    path: &[u64],
    mode: ExecMode,
) -> Result<ScoredGroup> {
    let mut group = sample_group(policy, &pair.context, pair.gold, sampling, seed, path, mode)?;
    let breakdowns = scorer.score(pair, &group.trajectories)?;
    group.assign_rewards(breakdowns.iter().map(|b| b.reward).collect(), sigma_floor)?;
    Ok(ScoredGroup { group, breakdowns })
}

/// Owns the policy and optimizer state across epochs.
pub struct Trainer {
    pub policy: LogLinearModel,
    pub state: OptimizerState,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub mode: ExecMode,
    pub step: usize,
}

impl Trainer {
    pub fn new(
        policy: LogLinearModel,
        train: TrainConfig,
        sampling: SamplingConfig,
        mode: ExecMode,
    ) -> Result<Self> {
        train.validate()?;
        sampling.validate()?;
        if sampling.group_size != train.group_size {
            return Err(Error::InvalidArgument(format!(
                "sampling group size {} differs from training group size {}",
                sampling.group_size, train.group_size
            )));
        }
        Ok(Trainer {
            state: OptimizerState::new(policy.weights().len()),
            policy,
            train,
            sampling,
            mode,
            step: 0,
        })
    }

    /// Runs one pass over `pairs`, calling `on_step` after every optimizer step.
    pub fn train_epoch<S, F>(&mut self, scorer: &S, pairs: &[ContextTargetPair], epoch: usize, mut on_step: F) -> Result<Vec<StepMetrics>>
    where
        S: Scorer + ?Sized,
        F: FnMut(&StepMetrics, &LogLinearModel) -> Result<()>,
    {
        if pairs.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::stream(self.train.seed, &[epoch as u64, u64::MAX]));
        let mut metrics = Vec::new();
        for batch in order.chunks(self.train.batch_size) {
            let old = self.policy.clone();
            let groups = exec::try_map_indexed(self.mode, batch.len(), |i| {
                let idx = batch[i];
                rollout_and_score(
                    &old,
                    scorer,
                    &pairs[idx],
                    &self.sampling,
                    self.train.sigma_floor,
                    self.train.seed,
                    &[epoch as u64, idx as u64],
                    ExecMode::Sequential,
                )
            })?;
            for _ in 0..self.train.ppo_epochs {
                for mini in groups.chunks(self.train.minibatch_size) {
                    let m = self.optimize_minibatch(mini)?;
                    on_step(&m, &self.policy)?;
                    metrics.push(m);
                }
            }
        }
        Ok(metrics)
    }

    fn optimize_minibatch(&mut self, groups: &[ScoredGroup]) -> Result<StepMetrics> {
        let items: Vec<SurrogateItem> = groups
            .iter()
            .flat_map(|sg| {
                let prompt = build_prompt(&sg.group.context, self.sampling.reason_start);
                sg.group.trajectories.iter().zip(&sg.group.advantages).map(move |(t, &a)| SurrogateItem {
                    prompt: prompt.clone(),
                    tokens: t.tokens.to_vec(),
                    old_log_prob: t.log_prob(),
                    advantage: a,
                })
            })
            .collect();
        let step = self.step + 1;
        let eval = minibatch_loss_and_grad(
            &self.policy,
            &items,
            self.sampling.temperature,
            self.train.clip_eps,
            self.train.entropy_coef,
            self.mode,
        )?;
        let loss = eval.terms.total();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        optimizer_step(self.policy.weights_mut(), &mut self.state, &eval.grad, &self.train)?;
        self.step = step;
        let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.breakdowns).collect();
        let n = all.len() as f64;
        let mean_abs_advantage = groups
            .iter()
            .flat_map(|g| &g.group.advantages)
            .map(|a| a.abs())
            .sum::<f64>()
            / n;
        Ok(StepMetrics {
            step,
            mean_reward: all.iter().map(|b| b.reward).sum::<f64>() / n,
            mean_base: all.iter().map(|b| b.base).sum::<f64>() / n,
            mean_penalty: all.iter().map(|b| b.penalty).sum::<f64>() / n,
            mean_abs_advantage,
            clipped_fraction: eval.clipped as f64 / items.len() as f64,
            grad_norm,
            entropy: eval.mean_entropy,
        })
    }
}

/// One supervised pass of next-token training on the kept pairs, `batch_size` pairs per step.
pub fn slm_train_epoch(
    model: &mut LogLinearModel,
    state: &mut OptimizerState,
    pairs: &[ContextTargetPair],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<f64>> {
    let kept: Vec<ContextTargetPair> = pairs.iter().filter(|p| p.is_kept()).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[epoch as u64, u64::MAX]));
    let mut losses = Vec::new();
    for batch in order.chunks(cfg.batch_size) {
        let chunk: Vec<ContextTargetPair> = batch.iter().map(|&i| kept[i].clone()).collect();
        let l = slm_loss(model, &chunk)?;
        if !l.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step as usize + 1,
                detail: format!("loss {}", l.loss),
            });
        }
        optimizer_step(model.weights_mut(), state, &l.grad, cfg)?;
        losses.push(l.loss);
    }
    Ok(losses)
}

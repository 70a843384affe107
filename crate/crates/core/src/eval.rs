//! Intrinsic next-word evaluation with self-consistency voting, plus the
//! hard-reward and supervised baselines.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, ContextTargetPair};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::lm::{next_token_distribution, sequence_log_prob, LanguageModel, LogLinearModel, TokenSequence, Vocabulary};
use crate::reward::{judge_distribution, judge_input};
use crate::rng;
use crate::rollout::{build_prompt, sample_trajectory, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub context: TokenSequence,
    pub candidates: Vec<usize>,
    pub gold_index: usize,
}

impl EvalInstance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::InvalidArgument("eval context must be non-empty".into()));
        }
        if self.candidates.len() < 2 {
            return Err(Error::InvalidArgument("need at least two candidates".into()));
        }
        if let Some(&c) = self.candidates.iter().find(|&&c| c >= vocab_size) {
            return Err(Error::CandidateOutOfVocabulary(c));
        }
        let mut sorted = self.candidates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.candidates.len() {
            return Err(Error::InvalidArgument("candidates must be distinct".into()));
        }
        if self.gold_index >= self.candidates.len() {
            return Err(Error::IndexOutOfRange {
                id: self.gold_index,
                size: self.candidates.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub votes: Vec<usize>,
    pub prediction: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    /// Policy sampling temperature.
    pub temperature: f64,
    /// Judge temperature when scoring candidates.
    pub judge_temperature: f64,
    pub max_len: usize,
    pub reason_start: usize,
    pub stop: usize,
    pub box_open: usize,
}

impl EvalConfig {
    /// 10 samples at temperature 0.8, judge read at temperature 1.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        EvalConfig {
            samples: 10,
            temperature: 0.8,
            judge_temperature: 1.0,
            max_len: 16,
            reason_start: vocab.reason_start(),
            stop: vocab.eos(),
            box_open: vocab.box_open(),
        }
    }

    fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            group_size: 2,
            max_len: self.max_len,
            temperature: self.temperature,
            stop: self.stop,
            reason_start: self.reason_start,
        }
    }

    fn check(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("samples must be at least 1".into()));
        }
        self.sampling().validate()
    }
}

/// Judge probability of each candidate, taken from the full distribution
/// without renormalizing.
pub fn score_candidates<J: LanguageModel + ?Sized>(
    judge: &J,
    trajectory: &[usize],
    candidates: &[usize],
    temperature: f64,
) -> Result<Vec<f64>> {
    if let Some(&c) = candidates.iter().find(|&&c| c >= judge.vocab_size()) {
        return Err(Error::CandidateOutOfVocabulary(c));
    }
    let dist = judge_distribution(judge, trajectory, temperature)?;
    Ok(candidates.iter().map(|&c| dist.prob(c)).collect())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Most frequent vote; ties go to the lowest index.
pub fn majority(votes: &[usize], options: usize) -> usize {
    let mut counts = vec![0usize; options.max(votes.iter().max().map_or(0, |m| m + 1))];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn outcome(votes: Vec<usize>, instance: &EvalInstance) -> EvalOutcome {
    let prediction = majority(&votes, instance.candidates.len());
    EvalOutcome {
        correct: prediction == instance.gold_index,
        votes,
        prediction,
    }
}

pub fn self_consistency_predict<P, J>(
    policy: &P,
    judge: &J,
    instance: &EvalInstance,
    cfg: &EvalConfig,
    seed: u64,
    path: &[u64],
) -> Result<EvalOutcome>
where
    P: LanguageModel + ?Sized,
    J: LanguageModel + ?Sized,
{
    cfg.check()?;
    let sampling = cfg.sampling();
    let mut votes = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        let mut member = path.to_vec();
        member.push(s as u64);
        let traj = sample_trajectory(policy, &instance.context, &sampling, &mut rng::stream(seed, &member))?;
        let input = judge_input(traj.body(cfg.stop), cfg.reason_start);
        let scores = score_candidates(judge, &input, &instance.candidates, cfg.judge_temperature)?;
        votes.push(argmax_first(&scores));
    }
    Ok(outcome(votes, instance))
}

/// The trajectory up to and including the first box marker, or the whole
/// trajectory when no marker was emitted.
pub fn boxed_prefix(tokens: &[usize], box_open: usize) -> &[usize] {
    match tokens.iter().position(|&t| t == box_open) {
        Some(i) => &tokens[..=i],
        None => tokens,
    }
}

/// 1 when the token right after the first box marker is the gold word.
pub fn no_judge_reward(tokens: &[usize], gold: usize, box_open: usize) -> f64 {
    match tokens.iter().position(|&t| t == box_open) {
        Some(i) if tokens.get(i + 1) == Some(&gold) => 1.0,
        _ => 0.0,
    }
}

/// Candidate scores as policy log-probabilities after `prompt ++ prefix`.
pub fn score_completions<P: LanguageModel + ?Sized>(
    policy: &P,
    context: &[usize],
    prefix: &[usize],
    candidates: &[usize],
    reason_start: usize,
) -> Result<Vec<f64>> {
    let mut history = build_prompt(context, reason_start);
    history.extend_from_slice(prefix);
    candidates
        .iter()
        .map(|&c| {
            if c >= policy.vocab_size() {
                return Err(Error::CandidateOutOfVocabulary(c));
            }
            sequence_log_prob(policy, &history, &[c], 1.0)
        })
        .collect()
}

pub fn no_judge_predict<P: LanguageModel + ?Sized>(
    policy: &P,
    instance: &EvalInstance,
    cfg: &EvalConfig,
    seed: u64,
    path: &[u64],
) -> Result<EvalOutcome> {
    cfg.check()?;
    let sampling = cfg.sampling();
    let mut votes = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        let mut member = path.to_vec();
        member.push(s as u64);
        let traj = sample_trajectory(policy, &instance.context, &sampling, &mut rng::stream(seed, &member))?;
        if !traj.tokens.contains(&cfg.box_open) {
            log::debug!("no box marker in sample {s}; scoring after the whole trajectory");
        }
        let prefix = boxed_prefix(&traj.tokens, cfg.box_open);
        let scores = score_completions(policy, &instance.context, prefix, &instance.candidates, cfg.reason_start)?;
        votes.push(argmax_first(&scores));
    }
    Ok(outcome(votes, instance))
}

/// Supervised baseline prediction: the candidate the model itself ranks
/// highest as the next token of the raw context.
pub fn slm_predict<P: LanguageModel + ?Sized>(policy: &P, instance: &EvalInstance) -> Result<EvalOutcome> {
    let dist = next_token_distribution(policy, &instance.context, 1.0)?;
    let scores: Vec<f64> = instance.candidates.iter().map(|&c| dist.prob(c)).collect();
    Ok(outcome(vec![argmax_first(&scores)], instance))
}

#[derive(Debug, Clone)]
pub struct SlmLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Indices of the pairs that contributed.
    pub touched: Vec<usize>,
}

/// Mean negative log-likelihood of gold tokens over pairs with `mask[i]` set.
pub fn slm_loss_masked(model: &LogLinearModel, pairs: &[ContextTargetPair], mask: &[bool]) -> Result<SlmLoss> {
    if mask.len() != pairs.len() {
        return Err(Error::ShapeMismatch {
            expected: pairs.len(),
            actual: mask.len(),
        });
    }
    let touched: Vec<usize> = (0..pairs.len()).filter(|&i| mask[i]).collect();
    if touched.is_empty() {
        return Err(Error::EmptySelection);
    }
    let scale = 1.0 / touched.len() as f64;
    let mut grad = vec![0.0; model.weights().len()];
    let mut loss = 0.0;
    for &i in &touched {
        let p = &pairs[i];
        let dist = model.accumulate_grad_log_prob(&p.context, p.gold, 1.0, -scale, &mut grad)?;
        loss -= scale * dist.prob(p.gold).ln();
    }
    Ok(SlmLoss { loss, grad, touched })
}

/// Selective loss over the pairs the filter kept.
pub fn slm_loss(model: &LogLinearModel, pairs: &[ContextTargetPair]) -> Result<SlmLoss> {
    let mask: Vec<bool> = pairs.iter().map(|p| p.is_kept()).collect();
    slm_loss_masked(model, pairs, &mask)
}

/// Evaluates every instance; instance `i` uses rng path `(i, sample)`.
pub fn evaluate<F>(instances: &[EvalInstance], mode: ExecMode, predict: F) -> Result<Vec<EvalOutcome>>
where
    F: Fn(usize, &EvalInstance) -> Result<EvalOutcome> + Sync + Send,
{
    exec::try_map_indexed(mode, instances.len(), |i| predict(i, &instances[i]))
}

pub fn accuracy(outcomes: &[EvalOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64
}

/// Percentile bootstrap interval for accuracy at the given coverage.
pub fn bootstrap_ci(outcomes: &[EvalOutcome], resamples: usize, coverage: f64, seed: u64) -> (f64, f64) {
    let n = outcomes.len();
    if n == 0 || resamples == 0 {
        return (0.0, 0.0);
    }
    let mut r = rng::stream(seed, &[0xb0075]);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| outcomes[r.random_range(0..n)].correct).count() as f64 / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - coverage) / 2.0;
    let at = |q: f64| stats[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub instance_id: usize,
    pub votes: Vec<usize>,
    pub prediction: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub instances: usize,
    pub config_hash: String,
}

pub fn summarize(outcomes: &[EvalOutcome], resamples: usize, seed: u64, config_hash: &str) -> EvalSummary {
    let (ci_low, ci_high) = bootstrap_ci(outcomes, resamples, 0.95, seed);
    EvalSummary {
        accuracy: accuracy(outcomes),
        ci_low,
        ci_high,
        instances: outcomes.len(),
        config_hash: config_hash.to_string(),
    }
}

/// Writes one record per instance followed by a `{"summary": ..}` line.
pub fn write_results(path: impl AsRef<Path>, outcomes: &[EvalOutcome], summary: &EvalSummary) -> Result<()> {
    let mut lines: Vec<serde_json::Value> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            serde_json::to_value(ResultRecord {
                instance_id: i,
                votes: o.votes.clone(),
                prediction: o.prediction,
                correct: o.correct,
            })
            .unwrap()
        })
        .collect();
    lines.push(serde_json::json!({ "summary": summary }));
    crate::data::write_jsonl(path, &lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstanceRecord {
    context: String,
    candidates: Vec<String>,
    gold_index: usize,
}

pub fn save_instances(path: impl AsRef<Path>, instances: &[EvalInstance], vocab: &Vocabulary) -> Result<()> {
    let records = instances
        .iter()
        .map(|inst| {
            Ok(InstanceRecord {
                context: vocab.decode(&inst.context)?,
                candidates: inst
                    .candidates
                    .iter()
                    .map(|&c| vocab.decode(&[c]))
                    .collect::<Result<_>>()?,
                gold_index: inst.gold_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    crate::data::write_jsonl(path, &records)
}

pub fn load_instances(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<EvalInstance>> {
    let records: Vec<InstanceRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let malformed = |detail: String| Error::MalformedRecord { line: i + 1, detail };
            let candidates = r
                .candidates
                .iter()
                .map(|w| vocab.id(w).ok_or_else(|| malformed(format!("unknown candidate `{w}`"))))
                .collect::<Result<Vec<_>>>()?;
            let inst = EvalInstance {
                context: vocab.encode(&r.context).map_err(|e| malformed(e.to_string()))?,
                candidates,
                gold_index: r.gold_index,
            };
            inst.validate(vocab.len()).map_err(|e| malformed(e.to_string()))?;
            Ok(inst)
        })
        .collect()
}

//! Vocabulary, token distributions and the two local language-model backends.
//!
//! Both backends expose pre-softmax scores through [`LanguageModel`]; the free
//! functions here turn scores into distributions, sequence log-probabilities
//! and samples. Temperature always divides the scores before the softmax.

mod checkpoint;
mod dist;
mod loglinear;
mod ngram;
mod vocab;

use rand::Rng;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use dist::TokenDistribution;
pub use loglinear::{FeatureExtractor, GradSink, LogLinearModel, RowSparseGrad, WINDOW};
pub use ngram::{fit_ngram, NGramModel};
pub use vocab::{TokenSequence, Vocabulary, BOS, BOX_OPEN, EOS, REASON_START, SPECIALS};

use crate::error::{Error, Result};

/// An autoregressive model over a fixed vocabulary.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Pre-softmax next-token scores given the full history. Entries may be
    /// `-inf` but at least one must be finite.
    fn scores(&self, history: &[usize]) -> Vec<f64>;
}

fn check_ids<M: LanguageModel + ?Sized>(model: &M, ids: &[usize]) -> Result<()> {
    let size = model.vocab_size();
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(Error::IndexOutOfRange { id, size }),
        None => Ok(()),
    }
}

pub fn next_token_distribution<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[usize],
    temperature: f64,
) -> Result<TokenDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    check_ids(model, context)?;
    TokenDistribution::from_scores(&model.scores(context), temperature)
}

/// Sum of per-token log-probabilities of `continuation` after `context`.
pub fn sequence_log_prob<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[usize],
    continuation: &[usize],
    temperature: f64,
) -> Result<f64> {
    check_ids(model, continuation)?;
    let mut history = context.to_vec();
    let mut total = 0.0;
    for &tok in continuation {
        let dist = next_token_distribution(model, &history, temperature)?;
        total += dist.prob(tok).ln();
        history.push(tok);
    }
    Ok(total)
}

/// Inverse-CDF draw from `dist`.
pub fn sample_from<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    // u landed in the rounding slack above the final cumulative sum
    last_positive
}

pub fn sample_next<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[usize],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    let dist = next_token_distribution(model, context, temperature)?;
    Ok(sample_from(&dist, rng))
}

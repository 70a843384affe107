use std::collections::HashMap;

use super::{LanguageModel, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Add-`s` smoothed n-gram model. Immutable once fitted.
///
/// Histories shorter than `order - 1` are left-padded with BOS, both when
/// counting and when querying.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    smoothing: f64,
    vocab_size: usize,
    pad: usize,
    counts: HashMap<Vec<usize>, HashMap<usize, u64>>,
    totals: HashMap<Vec<usize>, u64>,
}

/// Counts every n-gram of `corpus`. A smoothing of zero gives maximum
/// likelihood estimates; unseen histories are uniform either way.
pub fn fit_ngram(corpus: &[TokenSequence], order: usize, smoothing: f64, vocab: &Vocabulary) -> Result<NGramModel> {
    if order < 1 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if !(smoothing >= 0.0) || !smoothing.is_finite() {
        return Err(Error::InvalidArgument(format!("smoothing must be >= 0, got {smoothing}")));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut model = NGramModel {
        order,
        smoothing,
        vocab_size: vocab.len(),
        pad: vocab.bos(),
        counts: HashMap::new(),
        totals: HashMap::new(),
    };
    for seq in corpus {
        vocab.check(seq)?;
        let mut padded = vec![model.pad; order - 1];
        padded.extend_from_slice(seq);
        for window in padded.windows(order) {
            let (history, next) = window.split_at(order - 1);
            *model
                .counts
                .entry(history.to_vec())
                .or_default()
                .entry(next[0])
                .or_default() += 1;
            *model.totals.entry(history.to_vec()).or_default() += 1;
        }
    }
    Ok(model)
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// The conditioning tuple used for `context`.
    pub fn history_of(&self, context: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        let tail = &context[context.len().saturating_sub(n)..];
        let mut h = vec![self.pad; n - tail.len()];
        h.extend_from_slice(tail);
        h
    }

    pub fn count(&self, history: &[usize], token: usize) -> u64 {
        self.counts
            .get(history)
            .and_then(|m| m.get(&token))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, history: &[usize]) -> u64 {
        self.totals.get(history).copied().unwrap_or(0)
    }

    /// Native (temperature 1) probability `(count + s) / (total + s|V|)`.
    pub fn probability(&self, context: &[usize], token: usize) -> f64 {
        let h = self.history_of(context);
        let total = self.total(&h);
        if total == 0 {
            return 1.0 / self.vocab_size as f64;
        }
        (self.count(&h, token) as f64 + self.smoothing) / (total as f64 + self.smoothing * self.vocab_size as f64)
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn scores(&self, history: &[usize]) -> Vec<f64> {
        let h = self.history_of(history);
        let total = self.total(&h);
        if total == 0 {
            return vec![0.0; self.vocab_size];
        }
        let denom = total as f64 + self.smoothing * self.vocab_size as f64;
        let row = &self.counts[&h];
        (0..self.vocab_size)
            .map(|w| {
                let c = row.get(&w).copied().unwrap_or(0) as f64;
                ((c + self.smoothing) / denom).ln()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::next_token_distribution;
    use approx::assert_abs_diff_eq;

    fn setup() -> (Vocabulary, Vec<TokenSequence>) {
        let v = Vocabulary::with_specials(["a", "b", "c"]).unwrap();
        let corpus = vec![v.encode("a b a b").unwrap(), v.encode("b c a").unwrap()];
        (v, corpus)
    }

    #[test]
    fn counts_match_hand_count() {
        let (v, _) = setup();
        let m = fit_ngram(&[v.encode("a b a b").unwrap()], 2, 0.1, &v).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(m.count(&[a], b), 2);
        assert_eq!(m.count(&[b], a), 1);
        assert_eq!(m.count(&[v.bos()], a), 1);
    }

    #[test]
    fn unseen_history_is_uniform() {
        let (v, corpus) = setup();
        let m = fit_ngram(&corpus, 2, 0.1, &v).unwrap();
        let d = next_token_distribution(&m, &[v.eos()], 1.0).unwrap();
        for &p in d.probs() {
            assert_abs_diff_eq!(p, 1.0 / v.len() as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn distribution_equals_brute_force_recount() {
        let (v, corpus) = setup();
        for order in 1..=3 {
            let s = 0.1;
            let m = fit_ngram(&corpus, order, s, &v).unwrap();
            // every history that can occur, plus an unseen one
            let probes: Vec<Vec<usize>> = vec![vec![], vec![1], vec![4], vec![4, 5], vec![5, 4], vec![6, 6]];
            for ctx in probes {
                let h = m.history_of(&ctx);
                // recount by scanning the padded corpus directly
                let mut counts = vec![0u64; v.len()];
                for seq in &corpus {
                    let mut padded = vec![v.bos(); order - 1];
                    padded.extend_from_slice(seq);
                    for i in (order - 1)..padded.len() {
                        if padded[i + 1 - order..i] == h[..] {
                            counts[padded[i]] += 1;
                        }
                    }
                }
                let total: u64 = counts.iter().sum();
                let d = next_token_distribution(&m, &ctx, 1.0).unwrap();
                for w in 0..v.len() {
                    let expect = if total == 0 {
                        1.0 / v.len() as f64
                    } else {
                        (counts[w] as f64 + s) / (total as f64 + s * v.len() as f64)
                    };
                    assert_abs_diff_eq!(d.prob(w), expect, epsilon = 1e-12);
                    assert_abs_diff_eq!(m.probability(&ctx, w), expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn unsmoothed_counts_give_ml_estimates() {
        // history x followed by x three times and y once
        let v = Vocabulary::with_specials(["x", "y"]).unwrap();
        let (x, y) = (v.id("x").unwrap(), v.id("y").unwrap());
        let corpus = vec![v.encode("x x x x y").unwrap()];
        assert_eq!((fit_ngram(&corpus, 2, 0.0, &v).unwrap().count(&[x], x)), 3);
        let m = fit_ngram(&corpus, 2, 0.0, &v).unwrap();
        let d = next_token_distribution(&m, &[x], 1.0).unwrap();
        assert_abs_diff_eq!(d.prob(x), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(d.prob(y), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn rejects_empty_corpus_and_bad_params() {
        let (v, corpus) = setup();
        assert!(matches!(fit_ngram(&[], 2, 0.1, &v), Err(Error::EmptyCorpus)));
        assert!(matches!(fit_ngram(&[TokenSequence::default()], 2, 0.1, &v), Err(Error::EmptyCorpus)));
        assert!(fit_ngram(&corpus, 0, 0.1, &v).is_err());
        assert!(fit_ngram(&corpus, 2, -1.0, &v).is_err());
    }
}

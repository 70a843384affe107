use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates that `probs` is nonnegative and sums to one.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(TokenDistribution { probs })
    }

    /// `softmax(scores / temperature)`. Scores may be `-inf`.
    pub fn from_scores(scores: &[f64], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidArgument(format!("no finite score (max {max})")));
        }
        let mut probs: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(TokenDistribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        TokenDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Highest-probability token; ties go to the lower id.
    pub fn argmax(&self) -> usize {
        self.ranked()[0]
    }

    /// Token ids by descending probability, ties broken by lower id.
    pub fn ranked(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.probs.len()).collect();
        ids.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        ids
    }

    /// The `min(k, len)` most probable ids.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut r = self.ranked();
        r.truncate(k.min(self.probs.len()));
        r
    }

    /// 1-based rank of `id` under [`ranked`](Self::ranked).
    pub fn rank_of(&self, id: usize) -> Option<usize> {
        if id >= self.probs.len() {
            return None;
        }
        let p = self.probs[id];
        let ahead = self
            .probs
            .iter()
            .enumerate()
            .filter(|&(j, &q)| q > p || (q == p && j < id))
            .count();
        Some(ahead + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_softmax() {
        let d = TokenDistribution::from_scores(&[2.0, 0.0], 1.0).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(d.prob(0), e2 / (e2 + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(d.prob(0), 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(d.prob(1), 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn equal_scores_are_uniform_at_any_temperature() {
        for t in [0.1, 1.0, 5.0] {
            let d = TokenDistribution::from_scores(&[1.3, 1.3], t).unwrap();
            assert_eq!(d.probs(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn higher_temperature_flattens() {
        let cold = TokenDistribution::from_scores(&[2.0, 0.0], 1.0).unwrap();
        let hot = TokenDistribution::from_scores(&[2.0, 0.0], 5.0).unwrap();
        assert!(hot.entropy() > cold.entropy());
    }

    #[test]
    fn rejects_bad_temperature_and_bad_probs() {
        assert!(matches!(
            TokenDistribution::from_scores(&[1.0], 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(TokenDistribution::from_scores(&[1.0], -1.0).is_err());
        assert!(TokenDistribution::from_probs(vec![0.5, 0.6]).is_err());
        assert!(TokenDistribution::from_probs(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn neg_infinite_scores_get_zero_mass() {
        let d = TokenDistribution::from_scores(&[f64::NEG_INFINITY, 0.0], 2.0).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn ranking_breaks_ties_by_lower_id() {
        let d = TokenDistribution::from_probs(vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(d.ranked(), vec![1, 0, 2]);
        assert_eq!(d.rank_of(2), Some(3));
        assert_eq!(d.rank_of(0), Some(2));
        assert_eq!(d.top_k(10).len(), 3);
        assert_eq!(d.rank_of(3), None);
    }
}

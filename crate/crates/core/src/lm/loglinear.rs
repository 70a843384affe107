use super::{LanguageModel, TokenDistribution};
use crate::error::{Error, Result};

/// History window length of the policy features.
pub const WINDOW: usize = 3;

/// Maps a history to the active feature rows: a bias row plus one bucketed
/// row per `(offset, token)` in the last [`WINDOW`] positions. Short
/// histories are left-padded with `pad`.
///
/// Buckets are collision-free when `feature_count >= 1 + WINDOW * vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureExtractor {
    vocab_size: usize,
    feature_count: usize,
    pad: usize,
}

impl FeatureExtractor {
    pub const ID: &'static str = "window3-bucketed";

    pub fn new(vocab_size: usize, feature_count: usize, pad: usize) -> Result<Self> {
        if feature_count < 2 {
            return Err(Error::InvalidArgument("feature_count must be at least 2".into()));
        }
        if pad >= vocab_size {
            return Err(Error::IndexOutOfRange {
                id: pad,
                size: vocab_size,
            });
        }
        Ok(FeatureExtractor {
            vocab_size,
            feature_count,
            pad,
        })
    }

    pub fn default_feature_count(vocab_size: usize) -> usize {
        1 + WINDOW * vocab_size
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    /// Row for "`token` sits `offset` positions back" (offset 1 = last token).
    pub fn row(&self, offset: usize, token: usize) -> usize {
        debug_assert!((1..=WINDOW).contains(&offset));
        1 + ((offset - 1) * self.vocab_size + token) % (self.feature_count - 1)
    }

    pub fn active(&self, history: &[usize]) -> [usize; WINDOW + 1] {
        let mut rows = [0; WINDOW + 1];
        for offset in 1..=WINDOW {
            let tok = if history.len() >= offset {
                history[history.len() - offset]
            } else {
                self.pad
            };
            rows[offset] = self.row(offset, tok);
        }
        rows
    }
}

/// Destination for gradient accumulation, addressed one weight row at a time.
pub trait GradSink {
    /// Length of the dense gradient this sink stands for.
    fn grad_len(&self) -> usize;
    /// The `width` entries starting at dense offset `start`.
    fn row_mut(&mut self, start: usize, width: usize) -> &mut [f64];
}

impl GradSink for [f64] {
    fn grad_len(&self) -> usize {
        self.len()
    }

    fn row_mut(&mut self, start: usize, width: usize) -> &mut [f64] {
        &mut self[start..start + width]
    }
}

impl GradSink for Vec<f64> {
    fn grad_len(&self) -> usize {
        self.len()
    }

    fn row_mut(&mut self, start: usize, width: usize) -> &mut [f64] {
        &mut self[start..start + width]
    }
}

/// A gradient stored only on the rows it touches. A rollout touches a handful of
/// feature rows, so this is far smaller than the dense vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowSparseGrad {
    len: usize,
    starts: Vec<usize>,
    widths: Vec<usize>,
    values: Vec<f64>,
}

impl RowSparseGrad {
    pub fn new(len: usize) -> Self {
        RowSparseGrad {
            len,
            ..Default::default()
        }
    }

    /// Number of stored rows.
    pub fn rows(&self) -> usize {
        self.starts.len()
    }

    /// Adds the stored rows into `dense`, row by row in first-touch order.
    pub fn add_into(&self, dense: &mut [f64]) {
        let mut at = 0;
        for (&start, &width) in self.starts.iter().zip(&self.widths) {
            for (d, x) in dense[start..start + width].iter_mut().zip(&self.values[at..at + width]) {
                *d += x;
            }
            at += width;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.len];
        self.add_into(&mut dense);
        dense
    }
}

impl GradSink for RowSparseGrad {
    fn grad_len(&self) -> usize {
        self.len
    }

    fn row_mut(&mut self, start: usize, width: usize) -> &mut [f64] {
        let mut at = 0;
        for (&s, &w) in self.starts.iter().zip(&self.widths) {
            if s == start {
                debug_assert_eq!(w, width);
                return &mut self.values[at..at + w];
            }
            at += w;
        }
        self.starts.push(start);
        self.widths.push(width);
        self.values.resize(at + width, 0.0);
        &mut self.values[at..]
    }
}

/// Log-linear next-token model with weights indexed by `(feature, token)`,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearModel {
    features: FeatureExtractor,
    weights: Vec<f64>,
}

impl LogLinearModel {
    /// All-zero weights, i.e. a uniform policy.
    pub fn new(vocab_size: usize, feature_count: usize, pad: usize) -> Result<Self> {
        let features = FeatureExtractor::new(vocab_size, feature_count, pad)?;
        Ok(LogLinearModel {
            weights: vec![0.0; feature_count * vocab_size],
            features,
        })
    }

    pub fn from_weights(vocab_size: usize, feature_count: usize, pad: usize, weights: Vec<f64>) -> Result<Self> {
        let features = FeatureExtractor::new(vocab_size, feature_count, pad)?;
        if weights.len() != feature_count * vocab_size {
            return Err(Error::ShapeMismatch {
                expected: feature_count * vocab_size,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        Ok(LogLinearModel { features, weights })
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    pub fn feature_count(&self) -> usize {
        self.features.feature_count
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn index(&self, row: usize, token: usize) -> usize {
        row * self.features.vocab_size + token
    }

    pub fn add_weight(&mut self, row: usize, token: usize, delta: f64) {
        let i = self.index(row, token);
        self.weights[i] += delta;
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if temperature > 0.0 {
            Ok(())
        } else {
            Err(Error::NonPositiveTemperature(temperature))
        }
    }

    /// Adds `scale * ∇θ log π(token | context)` into `grad` and returns the
    /// distribution it was computed from.
    pub fn accumulate_grad_log_prob<G: GradSink + ?Sized>(
        &self,
        context: &[usize],
        token: usize,
        temperature: f64,
        scale: f64,
        grad: &mut G,
    ) -> Result<TokenDistribution> {
        Self::check_temperature(temperature)?;
        self.check_grad(grad.grad_len(), token)?;
        let dist = TokenDistribution::from_scores(&self.scores(context), temperature)?;
        let v = self.features.vocab_size;
        let s = scale / temperature;
        for row in self.features.active(context) {
            let g = grad.row_mut(row * v, v);
            g[token] += s;
            for (g, p) in g.iter_mut().zip(dist.probs()) {
                *g -= s * p;
            }
        }
        Ok(dist)
    }

    /// Analytic `∇θ log π(token | context)` as a dense vector:
    /// `(φ(context, token) − E_π[φ(context, w)]) / temperature`.
    pub fn grad_log_prob(&self, context: &[usize], token: usize, temperature: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.weights.len()];
        self.accumulate_grad_log_prob(context, token, temperature, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * ∇θ H(π(· | context))` into `grad`; returns the entropy.
    pub fn accumulate_entropy_grad<G: GradSink + ?Sized>(
        &self,
        context: &[usize],
        temperature: f64,
        scale: f64,
        grad: &mut G,
    ) -> Result<f64> {
        Self::check_temperature(temperature)?;
        self.check_grad(grad.grad_len(), 0)?;
        let dist = TokenDistribution::from_scores(&self.scores(context), temperature)?;
        let h = dist.entropy();
        let v = self.features.vocab_size;
        for row in self.features.active(context) {
            let g = grad.row_mut(row * v, v);
            for (w, &p) in dist.probs().iter().enumerate() {
                if p > 0.0 {
                    g[w] -= scale * p * (p.ln() + h) / temperature;
                }
            }
        }
        Ok(h)
    }

    /// An empty row-sparse gradient shaped like this model's weights.
    pub fn sparse_grad(&self) -> RowSparseGrad {
        RowSparseGrad::new(self.weights.len())
    }

    fn check_grad(&self, len: usize, token: usize) -> Result<()> {
        if len != self.weights.len() {
            return Err(Error::ShapeMismatch {
                expected: self.weights.len(),
                actual: len,
            });
        }
        if token >= self.features.vocab_size {
            return Err(Error::IndexOutOfRange {
                id: token,
                size: self.features.vocab_size,
            });
        }
        Ok(())
    }
}

impl LanguageModel for LogLinearModel {
    fn vocab_size(&self) -> usize {
        self.features.vocab_size
    }

    fn scores(&self, history: &[usize]) -> Vec<f64> {
        let v = self.features.vocab_size;
        let mut s = vec![0.0; v];
        for row in self.features.active(history) {
            for (acc, w) in s.iter_mut().zip(&self.weights[row * v..(row + 1) * v]) {
                *acc += w;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{next_token_distribution, sequence_log_prob};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(seed: u64, v: usize, f: usize) -> LogLinearModel {
        let mut r = rng::stream(seed, &[]);
        let w = (0..v * f).map(|_| r.random_range(-1.0..1.0)).collect();
        LogLinearModel::from_weights(v, f, 0, w).unwrap()
    }

    fn log_prob(m: &LogLinearModel, ctx: &[usize], tok: usize, t: f64) -> f64 {
        sequence_log_prob(m, ctx, &[tok], t).unwrap()
    }

    #[test]
    fn uniform_weights_one_hot_gradient() {
        let v = 5;
        let m = LogLinearModel::new(v, FeatureExtractor::default_feature_count(v), 0).unwrap();
        let t = 2.0;
        let ctx = [1, 2, 3];
        let g = m.grad_log_prob(&ctx, 4, t).unwrap();
        for row in m.features().active(&ctx) {
            let expect = (1.0 - 1.0 / v as f64) / t;
            assert!((g[m.index(row, 4)] - expect).abs() < 1e-12);
            assert!((g[m.index(row, 0)] + 1.0 / v as f64 / t).abs() < 1e-12);
        }
    }

    #[test]
    fn bucketing_is_collision_free_at_default_size() {
        let v = 7;
        let fx = FeatureExtractor::new(v, FeatureExtractor::default_feature_count(v), 0).unwrap();
        let mut rows: Vec<usize> = (1..=WINDOW).flat_map(|o| (0..v).map(move |t| (o, t))).map(|(o, t)| fx.row(o, t)).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), WINDOW * v);
        assert!(!rows.contains(&0));
    }

    #[test]
    fn short_histories_are_padded() {
        let fx = FeatureExtractor::new(6, 19, 0).unwrap();
        assert_eq!(fx.active(&[]), fx.active(&[0, 0, 0]));
        assert_eq!(fx.active(&[4]), fx.active(&[0, 0, 4]));
        assert_eq!(fx.active(&[1, 2, 3, 4]), fx.active(&[2, 3, 4]));
    }

    #[test]
    fn score_function_identity() {
        let m = random_model(5, 6, 19);
        let ctx = [3, 1];
        let t = 0.7;
        let dist = next_token_distribution(&m, &ctx, t).unwrap();
        let mut acc = vec![0.0; m.weights().len()];
        for w in 0..6 {
            m.accumulate_grad_log_prob(&ctx, w, t, dist.prob(w), &mut acc).unwrap();
        }
        assert!(acc.iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut m = random_model(11, 5, 8);
        let ctx = [2, 4];
        let t = 1.3;
        let mut g = vec![0.0; m.weights().len()];
        m.accumulate_entropy_grad(&ctx, t, 1.0, &mut g).unwrap();
        let h = 1e-5;
        for i in 0..m.weights().len() {
            let orig = m.weights()[i];
            m.weights_mut()[i] = orig + h;
            let up = next_token_distribution(&m, &ctx, t).unwrap().entropy();
            m.weights_mut()[i] = orig - h;
            let down = next_token_distribution(&m, &ctx, t).unwrap().entropy();
            m.weights_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "entry {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = random_model(1, 4, 5);
        assert!(matches!(m.grad_log_prob(&[1], 0, 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(m.grad_log_prob(&[1], 9, 1.0).is_err());
        assert!(LogLinearModel::from_weights(4, 5, 0, vec![0.0; 3]).is_err());
        assert!(LogLinearModel::from_weights(4, 5, 0, vec![f64::NAN; 20]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sparse_and_dense_sinks_agree(seed in 0u64..10_000, toks in proptest::collection::vec(0usize..5, 1..6), scale in -2.0f64..2.0) {
            let m = random_model(seed, 5, 9);
            let mut dense = vec![0.0; m.weights().len()];
            let mut sparse = m.sparse_grad();
            let mut history = vec![1usize];
            for &tok in &toks {
                m.accumulate_grad_log_prob(&history, tok, 0.7, scale, &mut dense).unwrap();
                m.accumulate_grad_log_prob(&history, tok, 0.7, scale, &mut sparse).unwrap();
                m.accumulate_entropy_grad(&history, 0.7, scale, &mut dense).unwrap();
                m.accumulate_entropy_grad(&history, 0.7, scale, &mut sparse).unwrap();
                history.push(tok);
            }
            prop_assert!(sparse.rows() <= 9);
            prop_assert_eq!(sparse.to_dense(), dense);
        }

        #[test]
        fn gradient_matches_central_differences(seed in 0u64..10_000, tok in 0usize..5, t in 0.3f64..3.0) {
            let mut m = random_model(seed, 5, 9);
            let ctx = [1usize, 3, 2];
            let g = m.grad_log_prob(&ctx, tok, t).unwrap();
            let h = 1e-5;
            for i in 0..m.weights().len() {
                let orig = m.weights()[i];
                m.weights_mut()[i] = orig + h;
                let up = log_prob(&m, &ctx, tok, t);
                m.weights_mut()[i] = orig - h;
                let down = log_prob(&m, &ctx, tok, t);
                m.weights_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                prop_assert!(err < 1e-4, "entry {} fd {} analytic {}", i, fd, g[i]);
            }
        }

        #[test]
        fn entropy_nondecreasing_in_temperature(seed in 0u64..10_000, t1 in 0.1f64..5.0, dt in 0.0f64..5.0) {
            let m = random_model(seed, 6, 19);
            let lo = next_token_distribution(&m, &[2], t1).unwrap().entropy();
            let hi = next_token_distribution(&m, &[2], t1 + dt).unwrap().entropy();
            prop_assert!(hi >= lo - 1e-12);
        }
    }
}

//! The hint-grammar world.
//!
//! Every sentence is `prefix cue-c mark-j word(c, j)`: a filler prefix, then a
//! category cue and a member cue, then the gold word. "Open" templates replace
//! the member cue with a filler, so only the category is recoverable.
//!
//! The judge is fitted on hint sequences only and has never seen a context
//! token, so its reading of a raw context is uniform. Two hint registers point
//! at `word(c, j)`:
//!
//! * `hint-c sub-j` makes the judge name that word alone;
//! * `hint-c list-j` makes the judge name it with more confidence, but also
//!   spreads mass over its category siblings.
//!
//! Without the regularizer the list register earns more reward; with it the
//! tight register wins.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Document;
use crate::error::{Error, Result};
use crate::eval::EvalInstance;
use crate::lm::{FeatureExtractor, LogLinearModel, TokenSequence, Vocabulary, SPECIALS};
use crate::rng;

/// Upper bound on the generated vocabulary.
pub const MAX_VOCAB: usize = 512;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "so", "na", "vi", "po", "ze", "du", "fa", "gi", "hu", "be", "xo",
];
const FILLERS: [&str; 16] = [
    "the", "a", "and", "then", "it", "was", "so", "of", "to", "in", "on", "at", "by", "with", "as", "or",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEnvSpec {
    pub categories: usize,
    pub words_per_category: usize,
    pub templates: usize,
    pub open_templates: usize,
    pub prefix_len: usize,
    pub fillers: usize,
    pub vocab_seed: u64,
    pub corpus_size: usize,
    pub eval_size: usize,
    pub candidates: usize,
    /// Judge-corpus copies of each `hint sub word` sequence.
    pub judge_repeats: usize,
    /// Judge-corpus copies of each `hint list word` sequence.
    pub list_repeats: usize,
    /// Judge-corpus copies of each `hint list sibling` sequence.
    pub list_noise: usize,
}

impl Default for SynthEnvSpec {
    fn default() -> Self {
        SynthEnvSpec {
            categories: 8,
            words_per_category: 6,
            templates: 4,
            open_templates: 1,
            prefix_len: 3,
            fillers: 10,
            vocab_seed: 7,
            corpus_size: 2000,
            eval_size: 500,
            candidates: 4,
            judge_repeats: 300,
            list_repeats: 1000,
            list_noise: 100,
        }
    }
}

impl SynthEnvSpec {
    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.fillers + 2 * self.categories + 3 * self.words_per_category + self.categories * self.words_per_category
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("categories", self.categories),
            ("words_per_category", self.words_per_category),
            ("templates", self.templates),
            ("fillers", self.fillers),
            ("corpus_size", self.corpus_size),
            ("candidates", self.candidates),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if self.fillers > FILLERS.len() {
            return Err(Error::SpecTooLarge(format!("at most {} fillers available", FILLERS.len())));
        }
        let size = self.vocab_size();
        if size > MAX_VOCAB {
            return Err(Error::SpecTooLarge(format!("vocabulary of {size} exceeds {MAX_VOCAB}")));
        }
        if self.open_templates > self.templates {
            return Err(Error::InvalidArgument("open_templates exceeds templates".into()));
        }
        if self.candidates < 2 || self.candidates > self.categories {
            return Err(Error::InvalidArgument(format!(
                "candidates must lie in 2..={} (one per category)",
                self.categories
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub prefix: Vec<usize>,
    /// Open templates carry no member cue.
    pub open: bool,
}

/// A fully materialized sentence with its latent labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub category: usize,
    pub member: usize,
    pub template: usize,
}

impl Sentence {
    pub fn context(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn gold(&self) -> usize {
        *self.tokens.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Vec<Document>,
    pub judge_corpus: Vec<TokenSequence>,
    pub eval: Vec<EvalInstance>,
}

#[derive(Debug, Clone)]
pub struct SynthEnv {
    spec: SynthEnvSpec,
    vocab: Vocabulary,
    fillers: Vec<usize>,
    category_cues: Vec<usize>,
    member_cues: Vec<usize>,
    category_hints: Vec<usize>,
    member_hints: Vec<usize>,
    list_hints: Vec<usize>,
    words: Vec<Vec<usize>>,
    templates: Vec<Template>,
}

fn pseudo_words(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng::stream(seed, &[1]);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = r.random_range(2..=3);
        let w: String = (0..len).map(|_| SYLLABLES[r.random_range(0..SYLLABLES.len())]).collect();
        if !FILLERS.contains(&w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SynthEnv {
    pub fn new(spec: SynthEnvSpec) -> Result<Self> {
        spec.validate()?;
        let (nc, nw) = (spec.categories, spec.words_per_category);
        let mut names: Vec<String> = FILLERS[..spec.fillers].iter().map(|s| s.to_string()).collect();
        names.extend((0..nc).map(|c| format!("cue{c}")));
        names.extend((0..nw).map(|j| format!("mark{j}")));
        names.extend((0..nc).map(|c| format!("hint{c}")));
        names.extend((0..nw).map(|j| format!("sub{j}")));
        names.extend((0..nw).map(|j| format!("list{j}")));
        names.extend(pseudo_words(nc * nw, spec.vocab_seed));
        let vocab = Vocabulary::with_specials(names)?;
        let ids = |prefix: &str, n: usize| -> Vec<usize> {
            (0..n).map(|i| vocab.id(&format!("{prefix}{i}")).unwrap()).collect()
        };
        let fillers: Vec<usize> = FILLERS[..spec.fillers].iter().map(|f| vocab.id(f).unwrap()).collect();
        let first_word = SPECIALS.len() + spec.fillers + 2 * nc + 3 * nw;
        let words = (0..nc)
            .map(|c| (0..nw).map(|j| first_word + c * nw + j).collect())
            .collect();
        let mut r = rng::stream(spec.vocab_seed, &[2]);
        let templates = (0..spec.templates)
            .map(|t| Template {
                prefix: (0..spec.prefix_len).map(|_| fillers[r.random_range(0..fillers.len())]).collect(),
                open: t >= spec.templates - spec.open_templates,
            })
            .collect();
        Ok(SynthEnv {
            category_cues: ids("cue", nc),
            member_cues: ids("mark", nw),
            category_hints: ids("hint", nc),
            member_hints: ids("sub", nw),
            list_hints: ids("list", nw),
            fillers,
            words,
            templates,
            vocab,
            spec,
        })
    }

    pub fn spec(&self) -> &SynthEnvSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn word(&self, category: usize, member: usize) -> usize {
        self.words[category][member]
    }

    pub fn category_of(&self, token: usize) -> Option<usize> {
        self.words.iter().position(|ws| ws.contains(&token))
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn stopwords(&self) -> HashSet<usize> {
        self.fillers.iter().copied().collect()
    }

    /// Length of every context produced by the generator.
    pub fn context_len(&self) -> usize {
        self.spec.prefix_len + 2
    }

    /// The tight two-token hint for `word(category, member)`.
    pub fn hint(&self, category: usize, member: usize) -> [usize; 2] {
        [self.category_hints[category], self.member_hints[member]]
    }

    /// The spreading two-token hint for `word(category, member)`.
    pub fn list_hint(&self, category: usize, member: usize) -> [usize; 2] {
        [self.category_hints[category], self.list_hints[member]]
    }

    pub fn sentence<R: Rng + ?Sized>(&self, r: &mut R) -> Sentence {
        let category = r.random_range(0..self.spec.categories);
        let member = r.random_range(0..self.spec.words_per_category);
        let template = r.random_range(0..self.templates.len());
        let t = &self.templates[template];
        let mut tokens = t.prefix.clone();
        tokens.push(self.category_cues[category]);
        tokens.push(if t.open {
            self.fillers[r.random_range(0..self.fillers.len())]
        } else {
            self.member_cues[member]
        });
        tokens.push(self.word(category, member));
        Sentence {
            tokens,
            category,
            member,
            template,
        }
    }

    pub fn judge_corpus(&self) -> Vec<TokenSequence> {
        let mut out = Vec::new();
        for c in 0..self.spec.categories {
            for j in 0..self.spec.words_per_category {
                let [h, s] = self.hint(c, j);
                let l = self.list_hints[j];
                for (jj, &w) in self.words[c].iter().enumerate() {
                    if jj == j {
                        out.extend(std::iter::repeat_n(TokenSequence(vec![h, s, w]), self.spec.judge_repeats));
                        out.extend(std::iter::repeat_n(TokenSequence(vec![h, l, w]), self.spec.list_repeats));
                    } else {
                        out.extend(std::iter::repeat_n(TokenSequence(vec![h, l, w]), self.spec.list_noise));
                    }
                }
            }
        }
        out
    }

    pub fn eval_instance<R: Rng + ?Sized>(&self, r: &mut R) -> EvalInstance {
        let s = self.sentence(r);
        let others: Vec<usize> = (0..self.spec.categories).filter(|&c| c != s.category).collect();
        let mut candidates = vec![s.gold()];
        for i in index::sample(r, others.len(), self.spec.candidates - 1) {
            candidates.push(self.word(others[i], r.random_range(0..self.spec.words_per_category)));
        }
        candidates.shuffle(r);
        EvalInstance {
            gold_index: candidates.iter().position(|&w| w == s.gold()).unwrap(),
            context: TokenSequence(s.context().to_vec()),
            candidates,
        }
    }

    pub fn generate(&self, seed: u64) -> SynthData {
        let corpus = (0..self.spec.corpus_size)
            .map(|i| {
                let s = self.sentence(&mut rng::stream(seed, &[1, i as u64]));
                Document::new(format!("syn-{i}"), self.vocab.decode(&s.tokens).unwrap())
            })
            .collect();
        let eval = (0..self.spec.eval_size)
            .map(|i| self.eval_instance(&mut rng::stream(seed, &[2, i as u64])))
            .collect();
        SynthData {
            corpus,
            judge_corpus: self.judge_corpus(),
            eval,
        }
    }

    /// Untrained policy that already follows the output format: after the
    /// reasoning marker it favors a category hint (or, with weight
    /// `abstain`, stopping at once), then a member hint, then the stop token.
    /// It knows nothing about which hint fits which context.
    pub fn format_prior(&self, prior: &FormatPrior) -> Result<LogLinearModel> {
        let second: Vec<usize> = self.member_hints.iter().chain(&self.list_hints).copied().collect();
        self.prior(&self.category_hints, &second, prior)
    }

    /// Format prior for the hard-reward baseline: box marker, then a word,
    /// then the stop token.
    pub fn boxed_prior(&self, prior: &FormatPrior) -> Result<LogLinearModel> {
        let all_words: Vec<usize> = self.words.iter().flatten().copied().collect();
        self.prior(&[self.vocab.box_open()], &all_words, prior)
    }

    fn prior(&self, first: &[usize], second: &[usize], prior: &FormatPrior) -> Result<LogLinearModel> {
        let v = self.vocab.len();
        let f = FeatureExtractor::default_feature_count(v);
        let mut m = LogLinearModel::new(v, f, self.vocab.bos())?;
        let rs = self.vocab.reason_start();
        let rows = [1, 2, 3].map(|o| m.features().row(o, rs));
        for &t in first {
            m.add_weight(rows[0], t, prior.hint);
        }
        m.add_weight(rows[0], self.vocab.eos(), prior.abstain);
        for &t in second {
            m.add_weight(rows[1], t, prior.hint);
        }
        m.add_weight(rows[2], self.vocab.eos(), prior.stop);
        Ok(m)
    }
}

/// Logit offsets of the untrained policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatPrior {
    pub hint: f64,
    pub stop: f64,
    pub abstain: f64,
}

impl Default for FormatPrior {
    fn default() -> Self {
        FormatPrior {
            hint: 8.0,
            stop: 12.0,
            abstain: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{fit_ngram, next_token_distribution};

    fn small() -> SynthEnv {
        SynthEnv::new(SynthEnvSpec {
            categories: 2,
            words_per_category: 2,
            templates: 2,
            open_templates: 1,
            corpus_size: 200,
            eval_size: 50,
            candidates: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn gold_words_match_their_cue() {
        let env = small();
        let data = env.generate(3);
        for doc in &data.corpus {
            let toks = env.vocab().encode(&doc.text).unwrap();
            let cue = toks[env.spec().prefix_len];
            let c = env.category_cues.iter().position(|&x| x == cue).unwrap();
            assert_eq!(env.category_of(*toks.last().unwrap()), Some(c));
            let mark = toks[env.spec().prefix_len + 1];
            if let Some(j) = env.member_cues.iter().position(|&x| x == mark) {
                assert_eq!(*toks.last().unwrap(), env.word(c, j));
            }
        }
    }

    #[test]
    fn judge_prefers_the_correct_hint() {
        let env = SynthEnv::new(SynthEnvSpec::default()).unwrap();
        let judge = fit_ngram(&env.judge_corpus(), 3, 1e-3, env.vocab()).unwrap();
        let (nc, nw) = (env.spec().categories, env.spec().words_per_category);
        for c in 0..nc {
            for j in 0..nw {
                let p = next_token_distribution(&judge, &env.hint(c, j), 5.0).unwrap();
                let gold = p.prob(env.word(c, j));
                for cc in (0..nc).filter(|&cc| cc != c) {
                    let wrong = next_token_distribution(&judge, &env.hint(cc, j), 5.0).unwrap();
                    assert!(gold > wrong.prob(env.word(c, j)));
                }
                assert_eq!(p.argmax(), env.word(c, j));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let env = small();
        let (a, b) = (env.generate(11), env.generate(11));
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.eval, b.eval);
        assert_ne!(a.corpus, env.generate(12).corpus);
    }

    #[test]
    fn eval_candidates_are_distinct_words() {
        let env = SynthEnv::new(SynthEnvSpec::default()).unwrap();
        for inst in env.generate(5).eval {
            let set: HashSet<usize> = inst.candidates.iter().copied().collect();
            assert_eq!(set.len(), 4);
            let cats: HashSet<usize> = inst.candidates.iter().map(|&w| env.category_of(w).unwrap()).collect();
            assert_eq!(cats.len(), 4);
            assert!(inst.gold_index < 4);
        }
    }

    #[test]
    fn default_spec_sizes() {
        let spec = SynthEnvSpec::default();
        let env = SynthEnv::new(spec.clone()).unwrap();
        assert_eq!(env.vocab().len(), spec.vocab_size());
        assert_eq!(env.vocab().len(), 96);
        let too_big = SynthEnvSpec {
            categories: 40,
            words_per_category: 20,
            ..spec
        };
        assert!(matches!(SynthEnv::new(too_big), Err(Error::SpecTooLarge(_))));
    }

    #[test]
    fn prior_follows_format() {
        let env = small();
        let m = env.format_prior(&FormatPrior { hint: 4.0, stop: 8.0, abstain: 0.0 }).unwrap();
        let rs = env.vocab().reason_start();
        let d1 = next_token_distribution(&m, &[5, 6, rs], 1.0).unwrap();
        let hint_mass: f64 = env.category_hints.iter().map(|&h| d1.prob(h)).sum();
        assert!(hint_mass > 0.5);
        let d3 = next_token_distribution(&m, &[rs, 5, 6], 1.0).unwrap();
        assert_eq!(d3.argmax(), env.vocab().eos());
    }
}

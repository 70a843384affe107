//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a default, so an
//! empty file is a complete configuration. The config hash covers every setting except
//! file locations, so the same experiment run from two directories hashes identically.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{FormatPrior, SynthEnvSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::exec::ExecMode;
use crate::grpo::TrainConfig;
use crate::lm::Vocabulary;
use crate::remote::{CassetteMode, EndpointConfig};
use crate::reward::RewardConfig;
use crate::rollout::SamplingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bow,
    NoJudge,
    Slm,
    RandomFilter,
}

impl Mode {
    pub fn uses_judge(self) -> bool {
        matches!(self, Mode::Bow | Mode::RandomFilter)
    }
}

/// Where `prepare` gets its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    Corpus,
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, String);

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = f64::from_str(s).map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{s}` is not finite"))
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" | "yes" => Ok(true),
            "off" | "false" | "no" => Ok(false),
            _ => Err(format!("expected on/off, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        if *self { "on" } else { "off" }.to_string()
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $v:expr),* $(,)? }) => {
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!("expected one of {}, got `{s}`", [$($name),*].join("|"))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

enum_value!(Mode { "bow" => Mode::Bow, "no-judge" => Mode::NoJudge, "slm" => Mode::Slm, "random-filter" => Mode::RandomFilter });
enum_value!(Source { "synthetic" => Source::Synthetic, "corpus" => Source::Corpus });
enum_value!(ExecMode { "parallel" => ExecMode::Parallel, "sequential" => ExecMode::Sequential });
enum_value!(CassetteMode { "off" => CassetteMode::Off, "record" => CassetteMode::Record, "replay" => CassetteMode::Replay });

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub judge_corpus: PathBuf,
    pub vocab: PathBuf,
    pub pairs: PathBuf,
    pub eval_set: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub results: PathBuf,
    pub cassette: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = |f: &str| PathBuf::from("run").join(f);
        Paths {
            corpus: p("corpus.jsonl"),
            judge_corpus: p("judge_corpus.jsonl"),
            vocab: p("vocab.txt"),
            pairs: p("pairs.jsonl"),
            eval_set: p("eval.jsonl"),
            checkpoint: p("policy.ckpt"),
            metrics: p("metrics.jsonl"),
            results: p("results.jsonl"),
            cassette: p("cassette.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub regularizer: bool,
    pub exec: ExecMode,
    pub source: Source,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub max_traj_len: usize,
    pub rollout_temperature: f64,
    pub synth: SynthEnvSpec,
    pub prior: FormatPrior,
    pub judge_order: usize,
    pub judge_smoothing: f64,
    pub determinism_threshold: f64,
    /// Smoothing of the n-gram reference used by the heuristic filter.
    pub filter_smoothing: f64,
    /// 0 means the number of pairs the heuristic filter keeps.
    pub random_filter_count: usize,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub eval_judge_temperature: f64,
    pub bootstrap_resamples: usize,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub endpoint: EndpointConfig,
    pub cassette_mode: CassetteMode,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Bow,
            regularizer: true,
            exec: ExecMode::default(),
            source: Source::Synthetic,
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            max_traj_len: 16,
            rollout_temperature: 1.0,
            synth: SynthEnvSpec::default(),
            prior: FormatPrior::default(),
            judge_order: 3,
            judge_smoothing: 3.0,
            determinism_threshold: 0.9,
            filter_smoothing: 0.01,
            random_filter_count: 0,
            eval_samples: 10,
            eval_temperature: 0.8,
            eval_judge_temperature: 1.0,
            bootstrap_resamples: 1000,
            checkpoint_every: 0,
            endpoint: EndpointConfig::default(),
            cassette_mode: CassetteMode::Off,
            paths: Paths::default(),
        }
    }
}

/// Invokes `$f!` once per `(key, field, is_path)` triple, in documentation order.
macro_rules! for_each_key {
    ($cfg:expr, $f:ident) => {{
        $f!($cfg, "mode", mode, false);
        $f!($cfg, "regularizer", regularizer, false);
        $f!($cfg, "exec", exec, false);
        $f!($cfg, "source", source, false);
        $f!($cfg, "seed", train.seed, false);
        $f!($cfg, "epochs", train.epochs, false);
        $f!($cfg, "lr", train.lr, false);
        $f!($cfg, "beta1", train.beta1, false);
        $f!($cfg, "beta2", train.beta2, false);
        $f!($cfg, "adam_eps", train.adam_eps, false);
        $f!($cfg, "weight_decay", train.weight_decay, false);
        $f!($cfg, "clip_eps", train.clip_eps, false);
        $f!($cfg, "ppo_epochs", train.ppo_epochs, false);
        $f!($cfg, "batch_size", train.batch_size, false);
        $f!($cfg, "minibatch_size", train.minibatch_size, false);
        $f!($cfg, "group_size", train.group_size, false);
        $f!($cfg, "sigma_floor", train.sigma_floor, false);
        $f!($cfg, "entropy_coef", train.entropy_coef, false);
        $f!($cfg, "checkpoint_every", checkpoint_every, false);
        $f!($cfg, "judge_temperature", reward.judge_temperature, false);
        $f!($cfg, "top_k", reward.top_k, false);
        $f!($cfg, "alpha", reward.alpha, false);
        $f!($cfg, "max_traj_len", max_traj_len, false);
        $f!($cfg, "rollout_temperature", rollout_temperature, false);
        $f!($cfg, "judge_order", judge_order, false);
        $f!($cfg, "judge_smoothing", judge_smoothing, false);
        $f!($cfg, "determinism_threshold", determinism_threshold, false);
        $f!($cfg, "filter_smoothing", filter_smoothing, false);
        $f!($cfg, "random_filter_count", random_filter_count, false);
        $f!($cfg, "eval_samples", eval_samples, false);
        $f!($cfg, "eval_temperature", eval_temperature, false);
        $f!($cfg, "eval_judge_temperature", eval_judge_temperature, false);
        $f!($cfg, "bootstrap_resamples", bootstrap_resamples, false);
        $f!($cfg, "categories", synth.categories, false);
        $f!($cfg, "words_per_category", synth.words_per_category, false);
        $f!($cfg, "templates", synth.templates, false);
        $f!($cfg, "open_templates", synth.open_templates, false);
        $f!($cfg, "prefix_len", synth.prefix_len, false);
        $f!($cfg, "fillers", synth.fillers, false);
        $f!($cfg, "vocab_seed", synth.vocab_seed, false);
        $f!($cfg, "corpus_size", synth.corpus_size, false);
        $f!($cfg, "eval_size", synth.eval_size, false);
        $f!($cfg, "candidates", synth.candidates, false);
        $f!($cfg, "judge_repeats", synth.judge_repeats, false);
        $f!($cfg, "list_repeats", synth.list_repeats, false);
        $f!($cfg, "list_noise", synth.list_noise, false);
        $f!($cfg, "prior_hint", prior.hint, false);
        $f!($cfg, "prior_stop", prior.stop, false);
        $f!($cfg, "prior_abstain", prior.abstain, false);
        $f!($cfg, "endpoint_url", endpoint.base_url, false);
        $f!($cfg, "endpoint_model", endpoint.model, false);
        $f!($cfg, "endpoint_timeout_secs", endpoint.timeout_secs, false);
        $f!($cfg, "endpoint_concurrency", endpoint.max_concurrency, false);
        $f!($cfg, "endpoint_retries", endpoint.retry_limit, false);
        $f!($cfg, "endpoint_top_k", endpoint.top_k, false);
        $f!($cfg, "endpoint_backoff_ms", endpoint.backoff_ms, false);
        $f!($cfg, "cassette_mode", cassette_mode, false);
        $f!($cfg, "corpus", paths.corpus, true);
        $f!($cfg, "judge_corpus", paths.judge_corpus, true);
        $f!($cfg, "vocab", paths.vocab, true);
        $f!($cfg, "pairs", paths.pairs, true);
        $f!($cfg, "eval_set", paths.eval_set, true);
        $f!($cfg, "checkpoint", paths.checkpoint, true);
        $f!($cfg, "metrics", paths.metrics, true);
        $f!($cfg, "results", paths.results, true);
        $f!($cfg, "cassette", paths.cassette, true);
    }};
}

impl RunConfig {
    /// Reads a config file; a missing file is an error, an empty one yields defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::UnreadablePath {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override, as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! try_set {
            ($cfg:expr, $name:literal, $($field:ident).+, $is_path:expr) => {
                if key == $name {
                    $cfg.$($field).+ = Value::parse_value(value).map_err(|detail| Error::TypeError {
                        key: key.to_string(),
                        detail,
                    })?;
                    return Ok(());
                }
            };
        }
        for_each_key!(self, try_set);
        Err(Error::UnknownKey(key.to_string()))
    }

    /// Every `(key, value)` pair in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String, bool)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($cfg:expr, $name:literal, $($field:ident).+, $is_path:expr) => {
                out.push(($name, $cfg.$($field).+.render(), $is_path));
            };
        }
        for_each_key!(self, push);
        out
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _, _)| k).collect()
    }

    /// Settings that define the experiment, excluding file locations.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        self.entries().into_iter().filter(|(_, _, p)| !p).map(|(k, v, _)| (k, v)).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.resolved() {
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `alpha` actually applied: zero when the regularizer is switched off.
    pub fn effective_reward(&self) -> RewardConfig {
        RewardConfig {
            alpha: if self.regularizer { self.reward.alpha } else { 0.0 },
            ..self.reward.clone()
        }
    }

    pub fn is_regularized(&self) -> bool {
        self.effective_reward().alpha > 0.0
    }

    pub fn sampling(&self, vocab: &Vocabulary) -> SamplingConfig {
        SamplingConfig {
            group_size: self.train.group_size,
            max_len: self.max_traj_len,
            temperature: self.rollout_temperature,
            ..SamplingConfig::for_vocab(vocab)
        }
    }

    pub fn eval_config(&self, vocab: &Vocabulary) -> EvalConfig {
        EvalConfig {
            samples: self.eval_samples,
            temperature: self.eval_temperature,
            judge_temperature: self.eval_judge_temperature,
            max_len: self.max_traj_len,
            ..EvalConfig::for_vocab(vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.effective_reward().validate()?;
        self.synth.validate()?;
        if self.judge_order == 0 {
            return Err(Error::InvalidConfig("judge_order must be at least 1".into()));
        }
        if !(self.judge_smoothing > 0.0) || !(self.filter_smoothing > 0.0) {
            return Err(Error::InvalidConfig("smoothing must be positive".into()));
        }
        if !(self.determinism_threshold > 0.0 && self.determinism_threshold <= 1.0) {
            return Err(Error::InvalidConfig("determinism_threshold must lie in (0, 1]".into()));
        }
        if self.eval_samples == 0 || self.max_traj_len == 0 {
            return Err(Error::InvalidConfig("eval_samples and max_traj_len must be positive".into()));
        }
        for t in [self.rollout_temperature, self.eval_temperature, self.eval_judge_temperature] {
            if !(t > 0.0) {
                return Err(Error::NonPositiveTemperature(t));
            }
        }
        if !self.endpoint.base_url.is_empty() {
            self.endpoint.validate()?;
        }
        Ok(())
    }

    /// Fails with [`Error::MissingPath`] for the first named path key that does not exist.
    pub fn require_paths(&self, keys: &[&str]) -> Result<()> {
        for (k, v, is_path) in self.entries() {
            if is_path && keys.contains(&k) && !Path::new(&v).exists() {
                return Err(Error::MissingPath {
                    key: k.to_string(),
                    path: PathBuf::from(v),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v, _) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.reward.alpha, 0.1);
        assert_eq!(c.reward.judge_temperature, 5.0);
        assert_eq!(c.reward.top_k, 100);
        assert_eq!(c.train.group_size, 5);
        assert_eq!((c.train.batch_size, c.train.minibatch_size), (64, 16));
        assert_eq!(c.train.lr, 1e-6);
        assert_eq!(c.train.clip_eps, 0.2);
    }

    #[test]
    fn alpha_zero_turns_regularizer_off() {
        let c = RunConfig::parse("alpha = 0").unwrap();
        assert!(!c.is_regularized());
        let c = RunConfig::parse("regularizer = off").unwrap();
        assert!(!c.is_regularized());
        assert_eq!(c.effective_reward().alpha, 0.0);
        assert!(RunConfig::default().is_regularized());
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("alhpa = 0.1"), Err(Error::UnknownKey(k)) if k == "alhpa"));
        assert!(matches!(RunConfig::parse("lr = fast"), Err(Error::TypeError { key, .. }) if key == "lr"));
        assert!(matches!(RunConfig::parse("mode = both"), Err(Error::TypeError { .. })));
        assert!(matches!(RunConfig::parse("lr = inf"), Err(Error::TypeError { .. })));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn comments_overrides_and_round_trip() {
        let mut c = RunConfig::parse("# note\n\nmode = no-judge\nseed=7\n").unwrap();
        assert_eq!(c.mode, Mode::NoJudge);
        assert_eq!(c.train.seed, 7);
        c.apply_override("epochs=3").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert!(c.apply_override("epochs").is_err());
        let again = RunConfig::parse(&c.to_string()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.metrics = PathBuf::from("/elsewhere/m.jsonl");
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn keys_are_unique() {
        let keys = RunConfig::keys();
        let set: std::collections::HashSet<_> = keys.iter().collect();
        assert_eq!(set.len(), keys.len());
    }

    #[test]
    fn missing_paths_are_reported() {
        let mut c = RunConfig::default();
        c.paths.pairs = PathBuf::from("/definitely/not/here.jsonl");
        assert!(matches!(c.require_paths(&["pairs"]), Err(Error::MissingPath { key, .. }) if key == "pairs"));
        let f = tempfile::NamedTempFile::new().unwrap();
        c.paths.pairs = f.path().to_path_buf();
        assert!(c.require_paths(&["pairs"]).is_ok());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(RunConfig::parse("group_size = 1").unwrap().validate().is_err());
        assert!(RunConfig::parse("judge_smoothing = 0").unwrap().validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}

//! Command-line front end: `prepare`, `train`, `eval` and `inspect-reward`.
//!
//! Each subcommand is also exposed as a plain function so tests and embedders can drive
//! the pipeline without a process boundary. Every artifact written here is stamped with
//! the config hash.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Mode, RunConfig, Source};
use crate::data::{
    classifier_filter, extract_pairs, heuristic_filter, ingest_corpus, load_pairs, random_filter, read_jsonl, save_pairs, stamp_jsonl,
    stamp_text, write_jsonl, ContextTargetPair, Document, SynthEnv, Verdict,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, load_instances, no_judge_predict, save_instances, self_consistency_predict, slm_predict, summarize, write_results, EvalSummary,
};
use crate::grpo::{slm_train_epoch, JudgeScorer, NoJudgeScorer, OptimizerState, StepMetrics, Trainer};
use crate::lm::{fit_ngram, load_checkpoint, save_checkpoint, FeatureExtractor, LogLinearModel, NGramModel, TokenSequence, Vocabulary};
use crate::remote::{Cassette, CassetteMode, Client, RemoteClassifier};
use crate::reward::{final_reward, RewardBreakdown};

/// Steps averaged for the end-of-training summary.
pub const FINAL_WINDOW: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "bow", version, about = "Train next-word reasoning policies against a frozen judge")]
pub struct Cli {
    /// Flat `key = value` config file; omitted keys take their defaults.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write vocabulary, corpora, filtered pairs and the eval set.
    Prepare,
    /// Train the policy and write metrics and checkpoints.
    Train,
    /// Evaluate the checkpoint on the eval set and write results.
    Eval,
    /// Print the reward breakdown for one trajectory.
    InspectReward(InspectArgs),
    /// Print the fully resolved config and its hash.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Space-separated context tokens.
    #[arg(long)]
    pub context: String,
    /// Space-separated tokens fed to the judge as-is.
    #[arg(long)]
    pub trajectory: String,
    /// The gold next word.
    #[arg(long)]
    pub gold: String,
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &Error) -> String {
    let mut s = e.to_string();
    let mut src = std::error::Error::source(e);
    while let Some(inner) = src {
        s.push_str(": ");
        s.push_str(&inner.to_string());
        src = inner.source();
    }
    s.replace('\n', " ")
}

pub fn dispatch(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::Prepare => {
            let s = prepare(&cfg)?;
            writeln!(out, "prepared {} pairs ({} kept), {} eval instances", s.pairs, s.kept, s.eval_instances).map_err(io)?;
        }
        Command::Train => {
            let s = train(&cfg)?;
            writeln!(
                out,
                "trained {} steps; final {}-step mean reward {:.6}, penalty {:.6}",
                s.metrics.len().max(s.slm_losses.len()),
                FINAL_WINDOW,
                s.final_mean_reward,
                s.final_mean_penalty
            )
            .map_err(io)?;
        }
        Command::Eval => {
            let s = eval(&cfg)?;
            writeln!(
                out,
                "accuracy {:.4} (95% CI {:.4}-{:.4}) over {} instances",
                s.accuracy, s.ci_low, s.ci_high, s.instances
            )
            .map_err(io)?;
        }
        Command::InspectReward(a) => {
            let b = inspect_reward(&cfg, &a.context, &a.trajectory, &a.gold)?;
            write!(out, "{}", reward_table(&b, cfg.effective_reward().alpha)).map_err(io)?;
        }
        Command::ShowConfig => {
            write!(out, "{cfg}").map_err(io)?;
            writeln!(out, "# hash {}", cfg.hash()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn reward_table(b: &RewardBreakdown, alpha: f64) -> String {
    let rank = b.gold_rank.map_or("-".to_string(), |r| r.to_string());
    format!(
        "{:<10} {:>12}\n{:<10} {:>12}\n{:<10} {:>12.6}\n{:<10} {:>12.6}\n{:<10} {:>12.6}\n{:<10} {:>12.6}\n",
        "field", "value", "gold_rank", rank, "base", b.base, "penalty", b.penalty, "alpha", alpha, "reward", b.reward
    )
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn write_docs(path: &Path, docs: &[Document], hash: &str) -> Result<()> {
    ensure_parent(path)?;
    write_jsonl(path, docs)?;
    stamp_jsonl(path, hash)
}

fn encode_docs(docs: &[Document], vocab: &Vocabulary) -> Result<Vec<(String, TokenSequence)>> {
    docs.iter().map(|d| Ok((d.id.clone(), vocab.encode(&d.text)?))).collect()
}

fn synth_env(cfg: &RunConfig) -> Result<SynthEnv> {
    SynthEnv::new(cfg.synth.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub pairs: usize,
    pub kept: usize,
    pub eval_instances: usize,
}

pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let hash = cfg.hash();
    let p = &cfg.paths;
    let (vocab, docs, judge_docs, stopwords, min_context) = match cfg.source {
        Source::Synthetic => {
            let env = synth_env(cfg)?;
            let data = env.generate(cfg.train.seed);
            let vocab = env.vocab().clone();
            let judge_docs = data
                .judge_corpus
                .iter()
                .enumerate()
                .map(|(i, s)| Ok(Document::new(format!("judge-{i}"), vocab.decode(s)?)))
                .collect::<Result<Vec<_>>>()?;
            ensure_parent(&p.eval_set)?;
            save_instances(&p.eval_set, &data.eval, &vocab)?;
            stamp_jsonl(&p.eval_set, &hash)?;
            (vocab, data.corpus, Some(judge_docs), env.stopwords(), env.context_len())
        }
        Source::Corpus => {
            cfg.require_paths(&["corpus"])?;
            let docs = ingest_corpus(&p.corpus)?;
            let words: std::collections::BTreeSet<&str> = docs.iter().flat_map(|d| d.text.split_whitespace()).collect();
            let vocab = Vocabulary::with_specials(words)?;
            (vocab, docs, None, HashSet::new(), 1)
        }
    };
    ensure_parent(&p.vocab)?;
    vocab.save(&p.vocab)?;
    stamp_text(&p.vocab, &hash)?;
    if cfg.source == Source::Synthetic {
        write_docs(&p.corpus, &docs, &hash)?;
    }
    match judge_docs {
        Some(j) => write_docs(&p.judge_corpus, &j, &hash)?,
        None if !p.judge_corpus.exists() => write_docs(&p.judge_corpus, &docs, &hash)?,
        None => {}
    }

    let encoded = encode_docs(&docs, &vocab)?;
    let pairs: Vec<ContextTargetPair> = encoded.iter().flat_map(|(id, t)| extract_pairs(id, t, min_context)).collect();
    let seqs: Vec<TokenSequence> = encoded.into_iter().map(|(_, t)| t).collect();
    let reference = fit_ngram(&seqs, 2, cfg.filter_smoothing, &vocab)?;
    let mut pairs = heuristic_filter(&pairs, &reference, &vocab, &stopwords, cfg.determinism_threshold)?;
    if !cfg.endpoint.base_url.is_empty() {
        pairs = classify_kept(cfg, pairs, &vocab)?;
    }
    let kept = pairs.iter().filter(|p| p.is_kept()).count();
    ensure_parent(&p.pairs)?;
    save_pairs(&p.pairs, &pairs, &vocab)?;
    stamp_jsonl(&p.pairs, &hash)?;
    if cfg.source == Source::Corpus {
        cfg.require_paths(&["eval_set"])?;
    }
    let eval_instances = load_instances(&p.eval_set, &vocab)?.len();
    Ok(PrepareSummary {
        pairs: pairs.len(),
        kept,
        eval_instances,
    })
}

fn open_client(cfg: &RunConfig) -> Result<Client> {
    let client = Client::new(cfg.endpoint.clone())?;
    Ok(match cfg.cassette_mode {
        CassetteMode::Off => client,
        mode => {
            ensure_parent(&cfg.paths.cassette)?;
            client.with_cassette(Cassette::open(&cfg.paths.cassette, mode)?)
        }
    })
}

/// Sends heuristically kept pairs to the remote classifier; unparseable answers drop the pair.
fn classify_kept(cfg: &RunConfig, pairs: Vec<ContextTargetPair>, vocab: &Vocabulary) -> Result<Vec<ContextTargetPair>> {
    let classifier = RemoteClassifier {
        client: open_client(cfg)?,
        max_tokens: 256,
    };
    let (kept, dropped): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|p| p.is_kept());
    let judged: BTreeMap<(String, usize), Verdict> = classifier_filter(&kept, &classifier, vocab)?
        .into_iter()
        .map(|(p, _)| ((p.doc_id, p.offset), p.verdict))
        .collect();
    let mut out: Vec<ContextTargetPair> = kept
        .into_iter()
        .filter_map(|p| {
            let v = *judged.get(&(p.doc_id.clone(), p.offset))?;
            Some(ContextTargetPair { verdict: v, ..p })
        })
        .collect();
    out.extend(dropped);
    out.sort_by(|a, b| (&a.doc_id, a.offset).cmp(&(&b.doc_id, b.offset)));
    Ok(out)
}

pub fn load_judge(cfg: &RunConfig, vocab: &Vocabulary) -> Result<NGramModel> {
    cfg.require_paths(&["judge_corpus"])?;
    let docs: Vec<Document> = read_jsonl(&cfg.paths.judge_corpus)?;
    let seqs: Vec<TokenSequence> = docs.iter().map(|d| vocab.encode(&d.text)).collect::<Result<_>>()?;
    fit_ngram(&seqs, cfg.judge_order, cfg.judge_smoothing, vocab)
}

/// Untrained policy for `cfg.mode`: the synthetic format prior, or zeros for a user corpus.
pub fn initial_policy(cfg: &RunConfig, vocab: &Vocabulary) -> Result<LogLinearModel> {
    match cfg.source {
        Source::Synthetic => {
            let env = synth_env(cfg)?;
            if env.vocab() != vocab {
                return Err(Error::InvalidConfig("vocabulary file does not match the synthetic spec".into()));
            }
            match cfg.mode {
                Mode::NoJudge => env.boxed_prior(&cfg.prior),
                _ => env.format_prior(&cfg.prior),
            }
        }
        Source::Corpus => LogLinearModel::new(vocab.len(), FeatureExtractor::default_feature_count(vocab.len()), vocab.bos()),
    }
}

/// Pairs the configured mode trains on.
pub fn training_pairs(cfg: &RunConfig, pairs: &[ContextTargetPair]) -> Result<Vec<ContextTargetPair>> {
    let kept: Vec<ContextTargetPair> = pairs.iter().filter(|p| p.is_kept()).cloned().collect();
    match cfg.mode {
        Mode::RandomFilter => {
            let count = if cfg.random_filter_count == 0 {
                kept.len()
            } else {
                cfg.random_filter_count
            };
            Ok(random_filter(pairs, count, cfg.train.seed)?
                .into_iter()
                .map(|p| ContextTargetPair { verdict: Verdict::Kept, ..p })
                .collect())
        }
        Mode::Slm => Ok(pairs.to_vec()),
        Mode::Bow | Mode::NoJudge => Ok(kept),
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub slm_losses: Vec<f64>,
    pub final_mean_reward: f64,
    pub final_mean_penalty: f64,
    pub policy: LogLinearModel,
}

#[derive(Serialize)]
struct MetricsHeader<'a> {
    config_hash: &'a str,
    config: BTreeMap<&'static str, String>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    epoch: usize,
    #[serde(flatten)]
    metrics: &'a StepMetrics,
}

#[derive(Serialize)]
struct SlmRecord {
    epoch: usize,
    step: usize,
    loss: f64,
}

fn tail_mean(xs: impl DoubleEndedIterator<Item = f64> + ExactSizeIterator) -> f64 {
    let n = xs.len().min(FINAL_WINDOW);
    if n == 0 {
        return 0.0;
    }
    xs.rev().take(n).sum::<f64>() / n as f64
}

fn save_stamped_checkpoint(model: &LogLinearModel, path: &Path, hash: &str) -> Result<()> {
    ensure_parent(path)?;
    save_checkpoint(model, path)?;
    stamp_text(path, hash)
}

fn epoch_checkpoint_path(path: &Path, epoch: usize) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".epoch{epoch}"));
    path.with_file_name(name)
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut required = vec!["vocab", "pairs"];
    if cfg.mode.uses_judge() {
        required.push("judge_corpus");
    }
    cfg.require_paths(&required)?;
    let hash = cfg.hash();
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let pairs = training_pairs(cfg, &load_pairs(&cfg.paths.pairs, &vocab)?)?;
    let mut policy = initial_policy(cfg, &vocab)?;

    let mut lines: Vec<String> = vec![serde_json::to_string(&MetricsHeader {
        config_hash: &hash,
        config: cfg.resolved().into_iter().collect(),
    })
    .expect("header serializes")];
    let mut metrics = Vec::new();
    let mut slm_losses = Vec::new();
    let checkpoint_due = |epoch: usize| cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.train.epochs;

    match cfg.mode {
        Mode::Slm => {
            let mut state = OptimizerState::new(policy.weights().len());
            for epoch in 0..cfg.train.epochs {
                for loss in slm_train_epoch(&mut policy, &mut state, &pairs, &cfg.train, epoch)? {
                    slm_losses.push(loss);
                    lines.push(
                        serde_json::to_string(&SlmRecord {
                            epoch,
                            step: slm_losses.len(),
                            loss,
                        })
                        .expect("record serializes"),
                    );
                }
                log::info!("epoch {epoch}: loss {:.6}", slm_losses.last().copied().unwrap_or(f64::NAN));
                if checkpoint_due(epoch) {
                    save_stamped_checkpoint(&policy, &epoch_checkpoint_path(&cfg.paths.checkpoint, epoch + 1), &hash)?;
                }
            }
        }
        mode => {
            let sampling = cfg.sampling(&vocab);
            let mut trainer = Trainer::new(policy, cfg.train.clone(), sampling.clone(), cfg.exec)?;
            let judge;
            let judge_scorer;
            let no_judge_scorer = NoJudgeScorer { box_open: vocab.box_open() };
            let scorer: &dyn crate::grpo::Scorer = if mode == Mode::NoJudge {
                &no_judge_scorer
            } else {
                judge = load_judge(cfg, &vocab)?;
                judge_scorer = JudgeScorer::new(&judge, cfg.effective_reward(), &sampling)?;
                &judge_scorer
            };
            for epoch in 0..cfg.train.epochs {
                let ms = trainer.train_epoch(scorer, &pairs, epoch, |_, _| Ok(()))?;
                for m in &ms {
                    lines.push(serde_json::to_string(&StepRecord { epoch, metrics: m }).expect("record serializes"));
                }
                if let Some(last) = ms.last() {
                    log::info!("epoch {epoch}: step {} reward {:.6} penalty {:.6}", last.step, last.mean_reward, last.mean_penalty);
                }
                metrics.extend(ms);
                if checkpoint_due(epoch) {
                    save_stamped_checkpoint(&trainer.policy, &epoch_checkpoint_path(&cfg.paths.checkpoint, epoch + 1), &hash)?;
                }
            }
            policy = trainer.policy;
        }
    }

    ensure_parent(&cfg.paths.metrics)?;
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(&cfg.paths.metrics, text).map_err(|e| Error::io(&cfg.paths.metrics, e))?;
    save_stamped_checkpoint(&policy, &cfg.paths.checkpoint, &hash)?;
    Ok(TrainSummary {
        final_mean_reward: tail_mean(metrics.iter().map(|m| m.mean_reward)),
        final_mean_penalty: tail_mean(metrics.iter().map(|m| m.mean_penalty)),
        metrics,
        slm_losses,
        policy,
    })
}

pub fn eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let mut required = vec!["vocab", "eval_set", "checkpoint"];
    if cfg.mode.uses_judge() {
        required.push("judge_corpus");
    }
    cfg.require_paths(&required)?;
    let hash = cfg.hash();
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let instances = load_instances(&cfg.paths.eval_set, &vocab)?;
    let policy = load_checkpoint(&cfg.paths.checkpoint, vocab.bos())?;
    let ecfg = cfg.eval_config(&vocab);
    let seed = cfg.train.seed;
    let outcomes = match cfg.mode {
        Mode::Bow | Mode::RandomFilter => {
            let judge = load_judge(cfg, &vocab)?;
            evaluate(&instances, cfg.exec, |i, inst| {
                self_consistency_predict(&policy, &judge, inst, &ecfg, seed, &[i as u64])
            })?
        }
        Mode::NoJudge => evaluate(&instances, cfg.exec, |i, inst| no_judge_predict(&policy, inst, &ecfg, seed, &[i as u64]))?,
        Mode::Slm => evaluate(&instances, cfg.exec, |_, inst| slm_predict(&policy, inst))?,
    };
    let summary = summarize(&outcomes, cfg.bootstrap_resamples, seed, &hash);
    ensure_parent(&cfg.paths.results)?;
    write_results(&cfg.paths.results, &outcomes, &summary)?;
    stamp_jsonl(&cfg.paths.results, &hash)?;
    Ok(summary)
}

/// Reward of `trajectory` (fed to the judge verbatim) for predicting `gold` after `context`.
pub fn inspect_reward(cfg: &RunConfig, context: &str, trajectory: &str, gold: &str) -> Result<RewardBreakdown> {
    cfg.require_paths(&["vocab", "judge_corpus"])?;
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let judge = load_judge(cfg, &vocab)?;
    let ctx = vocab.encode(context)?;
    let traj = vocab.encode(trajectory)?;
    let gold = vocab.id(gold).ok_or(Error::UnknownToken(gold.to_string()))?;
    final_reward(&judge, &traj, &ctx, gold, &cfg.effective_reward())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subcommands_and_overrides() {
        let cli = Cli::try_parse_from(["bow", "train", "--set", "seed=3", "--set", "epochs=2"]).unwrap();
        assert!(matches!(cli.command, Command::Train));
        let cfg = load_config(None, &cli.overrides).unwrap();
        assert_eq!((cfg.train.seed, cfg.train.epochs), (3, 2));
        assert!(Cli::try_parse_from(["bow", "fly"]).is_err());
        let cli = Cli::try_parse_from(["bow", "inspect-reward", "--context", "a b", "--trajectory", "a b", "--gold", "c"]).unwrap();
        assert!(matches!(cli.command, Command::InspectReward(_)));
    }

    #[test]
    fn bad_override_is_one_line_error() {
        let mut sink = Vec::new();
        assert_eq!(run(["bow", "show-config", "--set", "alhpa=1"], &mut sink), 1);
        assert_eq!(run(["bow", "show-config"], &mut sink), 0);
        let text = String::from_utf8(sink).unwrap();
        assert!(text.contains("alpha = 0.1"));
        assert!(text.contains("# hash "));
    }

    #[test]
    fn final_window_mean() {
        assert_eq!(tail_mean(Vec::<f64>::new().into_iter()), 0.0);
        assert_eq!(tail_mean(vec![1.0, 3.0].into_iter()), 2.0);
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        assert_eq!(tail_mean(xs.into_iter()), (10..30).sum::<i32>() as f64 / 20.0);
    }

    #[test]
    fn epoch_checkpoint_names() {
        assert_eq!(epoch_checkpoint_path(Path::new("run/p.ckpt"), 3), PathBuf::from("run/p.ckpt.epoch3"));
    }
}

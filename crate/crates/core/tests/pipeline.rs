use std::path::Path;

use bow_core::cli::{self, run};
use bow_core::config::{Mode, RunConfig};
use bow_core::data::{load_pairs, read_stamp, Verdict};
use bow_core::exec::ExecMode;
use bow_core::lm::Vocabulary;
use bow_core::Error;

fn small_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::parse(
        "seed = 3\nepochs = 1\nlr = 0.02\ncorpus_size = 256\neval_size = 60\neval_samples = 3\nbootstrap_resamples = 100\n",
    )
    .unwrap();
    let p = &mut c.paths;
    p.corpus = dir.join("corpus.jsonl");
    p.judge_corpus = dir.join("judge.jsonl");
    p.vocab = dir.join("vocab.txt");
    p.pairs = dir.join("pairs.jsonl");
    p.eval_set = dir.join("eval.jsonl");
    p.checkpoint = dir.join("policy.ckpt");
    p.metrics = dir.join("metrics.jsonl");
    p.results = dir.join("results.jsonl");
    c
}

fn config_file(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.conf");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn every_mode_trains_and_evaluates() {
    for mode in [Mode::Bow, Mode::NoJudge, Mode::Slm, Mode::RandomFilter] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.mode = mode;
        if mode == Mode::RandomFilter {
            cfg.random_filter_count = 100;
        }
        cli::prepare(&cfg).unwrap();
        let t = cli::train(&cfg).unwrap();
        match mode {
            Mode::Slm => assert_eq!(t.slm_losses.len(), 4),
            Mode::RandomFilter => assert_eq!(t.metrics.len(), 7),
            _ => assert_eq!(t.metrics.len(), 16),
        }
        let e = cli::eval(&cfg).unwrap();
        assert_eq!(e.instances, 60);
        assert!((0.0..=1.0).contains(&e.accuracy));
        let hash = cfg.hash();
        for p in [&cfg.paths.vocab, &cfg.paths.pairs, &cfg.paths.eval_set, &cfg.paths.checkpoint, &cfg.paths.results] {
            assert_eq!(read_stamp(p).unwrap().as_deref(), Some(hash.as_str()), "{}", p.display());
        }
        let header = std::fs::read_to_string(&cfg.paths.metrics).unwrap();
        let header: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
        assert_eq!(header["config_hash"], hash.as_str());
        assert_eq!(header["config"]["alpha"], "0.1");
    }
}

#[test]
fn no_judge_eval_never_loads_the_judge() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.mode = Mode::NoJudge;
    cli::prepare(&cfg).unwrap();
    std::fs::remove_file(&cfg.paths.judge_corpus).unwrap();
    cli::train(&cfg).unwrap();
    let s = cli::eval(&cfg).unwrap();
    assert_eq!(s.instances, 60);
    cfg.mode = Mode::Bow;
    assert!(matches!(cli::eval(&cfg), Err(Error::MissingPath { key, .. }) if key == "judge_corpus"));
}

#[test]
fn binary_style_entry_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let conf = config_file(dir.path(), &cfg);
    let mut out = Vec::new();
    assert_eq!(run(["bow", "-c", &conf, "train"], &mut out), 1, "pairs are missing before prepare");
    assert_eq!(run(["bow", "-c", &conf, "prepare"], &mut out), 0);
    let ctx = "the a and cue0 mark0";
    assert_eq!(
        run(["bow", "-c", &conf, "inspect-reward", "--context", ctx, "--trajectory", ctx, "--gold", "the"], &mut out),
        0
    );
    let text = String::from_utf8(out).unwrap();
    let penalty = text.lines().find(|l| l.starts_with("penalty")).unwrap();
    assert_eq!(penalty.split_whitespace().nth(1), Some("0.000000"));
    assert!(text.contains("prepared 256 pairs"));
    let mut out = Vec::new();
    assert_eq!(run(["bow", "-c", &conf, "--set", "alpha=zero", "train"], &mut out), 1);
    assert_eq!(run(["bow", "-c", "/no/such/file.conf", "train"], &mut out), 1);
}

#[test]
fn sequential_and_parallel_runs_are_identical() {
    let mut metrics = Vec::new();
    for exec in [ExecMode::Sequential, ExecMode::Parallel] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.exec = exec;
        cli::prepare(&cfg).unwrap();
        let t = cli::train(&cfg).unwrap();
        cli::eval(&cfg).unwrap();
        let results = std::fs::read_to_string(&cfg.paths.results).unwrap();
        // the exec key differs, so compare everything after the stamp lines
        let body = |s: String| s.lines().skip(1).map(str::to_string).collect::<Vec<_>>();
        metrics.push((t.metrics, t.policy.weights().to_vec(), body(results)));
    }
    assert_eq!(metrics[0].0, metrics[1].0);
    assert_eq!(metrics[0].1, metrics[1].1);
    assert_eq!(metrics[0].2.len(), metrics[1].2.len());
    for (a, b) in metrics[0].2.iter().zip(&metrics[1].2) {
        if !a.starts_with("{\"summary\"") {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn user_corpus_goes_through_the_heuristic_filter() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.source = bow_core::config::Source::Corpus;
    let docs = [
        "my mom gave me a pair of socks",
        "it was cold so i put on a pair of socks",
        "a pair of gloves and a pair of socks",
    ];
    let corpus: String = docs
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}\n", serde_json::json!({"id": format!("d{i}"), "text": t})))
        .collect();
    std::fs::write(&cfg.paths.corpus, corpus).unwrap();
    let eval = serde_json::json!({"context": "a pair of", "candidates": ["socks", "gloves"], "gold_index": 0});
    std::fs::write(&cfg.paths.eval_set, format!("{eval}\n")).unwrap();
    let s = cli::prepare(&cfg).unwrap();
    assert!(s.kept > 0 && s.kept < s.pairs);
    let vocab = Vocabulary::load(&cfg.paths.vocab).unwrap();
    let pairs = load_pairs(&cfg.paths.pairs, &vocab).unwrap();
    let of = vocab.id("of").unwrap();
    assert!(pairs
        .iter()
        .filter(|p| p.gold == of)
        .all(|p| p.verdict == Verdict::DroppedDeterministic));
    cfg.mode = Mode::Slm;
    cli::train(&cfg).unwrap();
    assert_eq!(cli::eval(&cfg).unwrap().instances, 1);
}

#[test]
fn ppo_epochs_reuse_each_rollout_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.apply_override("ppo_epochs=2").unwrap();
    cli::prepare(&cfg).unwrap();
    let t = cli::train(&cfg).unwrap();
    assert_eq!(t.metrics.len(), 32);
    // the second pass sees the same rewards, since no new trajectories are drawn
    assert_eq!(t.metrics[0].mean_reward, t.metrics[4].mean_reward);
}

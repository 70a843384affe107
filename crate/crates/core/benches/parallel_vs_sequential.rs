use bow_core::data::{extract_pairs, SynthEnv, SynthEnvSpec};
use bow_core::eval::{evaluate, self_consistency_predict, EvalConfig};
use bow_core::exec::ExecMode;
use bow_core::grpo::{minibatch_loss_and_grad, rollout_and_score, JudgeScorer, SurrogateItem};
use bow_core::lm::fit_ngram;
use bow_core::reward::RewardConfig;
use bow_core::rollout::{build_prompt, SamplingConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn setup() -> (SynthEnv, bow_core::lm::NGramModel, Vec<bow_core::data::ContextTargetPair>) {
    let env = SynthEnv::new(SynthEnvSpec::default()).unwrap();
    let data = env.generate(7);
    let vocab = env.vocab().clone();
    let judge = fit_ngram(&env.judge_corpus(), 3, 3.0, &vocab).unwrap();
    let pairs = data
        .corpus
        .iter()
        .take(64)
        .flat_map(|d| extract_pairs(&d.id, &vocab.encode(&d.text).unwrap(), env.context_len()))
        .collect();
    (env, judge, pairs)
}

fn rollouts(c: &mut Criterion) {
    let (env, judge, pairs) = setup();
    let policy = env.format_prior(&Default::default()).unwrap();
    let sampling = SamplingConfig::for_vocab(env.vocab());
    let scorer = JudgeScorer::new(&judge, RewardConfig::default(), &sampling).unwrap();
    let mut g = c.benchmark_group("rollout_batch_64x5");
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                bow_core::exec::try_map_indexed(mode, pairs.len(), |i| {
                    rollout_and_score(&policy, &scorer, &pairs[i], &sampling, 1e-8, 7, &[0, i as u64], ExecMode::Sequential)
                })
                .unwrap()
            })
        });
    }
    g.finish();
}

fn surrogate(c: &mut Criterion) {
    let (env, judge, pairs) = setup();
    let policy = env.format_prior(&Default::default()).unwrap();
    let sampling = SamplingConfig::for_vocab(env.vocab());
    let scorer = JudgeScorer::new(&judge, RewardConfig::default(), &sampling).unwrap();
    let items: Vec<SurrogateItem> = pairs
        .iter()
        .take(16)
        .enumerate()
        .flat_map(|(i, p)| {
            let sg = rollout_and_score(&policy, &scorer, p, &sampling, 1e-8, 7, &[0, i as u64], ExecMode::Sequential).unwrap();
            let prompt = build_prompt(&p.context, sampling.reason_start);
            sg.group
                .trajectories
                .iter()
                .zip(&sg.group.advantages)
                .map(|(t, &a)| SurrogateItem {
                    prompt: prompt.clone(),
                    tokens: t.tokens.to_vec(),
                    old_log_prob: t.log_prob(),
                    advantage: a,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut g = c.benchmark_group("surrogate_grad_16x5");
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| minibatch_loss_and_grad(&policy, &items, 1.0, 0.2, 0.0, mode).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let (env, judge, _) = setup();
    let data = env.generate(7);
    let policy = env.format_prior(&Default::default()).unwrap();
    let cfg = EvalConfig::for_vocab(env.vocab());
    let instances = &data.eval[..100];
    let mut g = c.benchmark_group("self_consistency_100");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate(instances, mode, |i, inst| self_consistency_predict(&policy, &judge, inst, &cfg, 7, &[i as u64])).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, rollouts, surrogate, evaluation);
criterion_main!(benches);

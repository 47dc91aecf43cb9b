//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line; the desk-scale training runs behind criteria 1-3 and 9 are shared.

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::OnceLock;

use common::*;
use metatts::cloning::{prepare_unseen, run_sweep, AdaptConfig, Cloner, UnseenInit, DEFAULT_MARKS};
use metatts::corpus::{
    base_duration, generate_corpus, make_speaker, oracle_embed, render_utterance, CorpusConfig, PhonemeTemplates, Split,
};
use metatts::episodes::{build_eval_tasks, manifest_hash, EpisodeSampler};
use metatts::io::to_precise_json;
use metatts::baselines::{multitask_checkpoint, train_multitask, BaselineConfig};
use metatts::metalearn::*;
use metatts::metrics::*;
use metatts::model::{length_regulate, EmbMode, FastSpeech, ModelConfig, ModelInput, ModelParameters, ParamSet, Partition, SpeakerRef, VarianceTargets};
use metatts::optim::{Optimizer, OptimizerKind};
use metatts::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written to the process stdout directly so it shows without `--nocapture`.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: u32, pass: bool, detail: &str) {
    emit(&format!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" }));
}

// ---------------------------------------------------------------------------
// Desk-scale comparison grid

const SEEDS: [u64; 3] = [1, 2, 3];
/// Inner-loop step size; test-time fine-tuning uses the same rate.
const ALPHA: f64 = 0.2;
const STEPS: usize = 400;
const TASKS_PER_SPEAKER: usize = 2;

fn desk_model(mode: EmbMode) -> FastSpeech {
    FastSpeech::new(ModelConfig {
        hidden_dim: 16,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        n_heads: 2,
        ffn_dim: 32,
        predictor_dim: 16,
        spk_emb_dim: 16,
        emb_mode: mode,
        ..ModelConfig::default()
    })
    .unwrap()
}

struct SeedRun {
    meta: MetricReport,
    multitask: MetricReport,
    shared: MetricReport,
}

fn desk_meta_config() -> MetaConfig {
    MetaConfig {
        alpha: ALPHA,
        beta: 1e-2,
        inner_steps: 5,
        tasks_per_step: 8,
        k_shot: 5,
        total_meta_steps: STEPS,
        optimizer: OptimizerKind::adam(),
        inner_clip: Some(1.0),
        outer_clip: Some(1.0),
        ..MetaConfig::default()
    }
}

fn evaluate(model: &FastSpeech, cloner: &Cloner<'_>, test: &metatts::corpus::Corpus) -> MetricReport {
    let tasks = build_eval_tasks(test, TASKS_PER_SPEAKER, 5, 99).unwrap();
    let hash = manifest_hash(&tasks).unwrap();
    let cfg = AdaptConfig { mask: ModuleMask::ALL, marks: DEFAULT_MARKS.to_vec(), lr: ALPHA, clip: Some(1.0) };
    let results = run_sweep(model, cloner, test, &tasks, &hash, &cfg, 1).unwrap();
    build_report(&results, test, &ReportConfig::default(), serde_json::Value::Null).unwrap()
}

fn seed_run(seed: u64) -> SeedRun {
    let cc = CorpusConfig::default();
    let train = generate_corpus(20, 20, seed, Split::Train, &cc).unwrap();
    let test = generate_corpus(10, 20, seed + 1, Split::Test, &cc).unwrap();
    let mcfg = desk_meta_config();
    let opts = RunOptions::default();

    let meta_for = |mode: EmbMode| {
        let model = desk_model(mode);
        let state = TrainState::init(&model, &train, mcfg.optimizer, seed).unwrap();
        let state = meta_train(&model, &train, &mcfg, ModuleMask::ALL, seed, state, &opts, &mut |_| {}).unwrap();
        let cloner = Cloner::Adaptation {
            approach: "meta".into(),
            params: &state.params,
            meta_mask: Some(ModuleMask::ALL),
            init: UnseenInit::Zero,
        };
        evaluate(&model, &cloner, &test)
    };
    let meta = meta_for(EmbMode::Table);
    let shared = meta_for(EmbMode::Shared);

    let model = desk_model(EmbMode::Table);
    let bcfg = BaselineConfig {
        lr: 1e-2,
        steps: STEPS,
        batch_size: mcfg.samples_per_step(),
        optimizer: OptimizerKind::adam(),
        ..BaselineConfig::default()
    };
    let state = TrainState::init(&model, &train, bcfg.optimizer, seed).unwrap();
    let state = train_multitask(&model, &train, &bcfg, seed, state, &opts, &mut |_| {}).unwrap();
    let cloner = Cloner::Adaptation { approach: "multitask".into(), params: &state.params, meta_mask: None, init: UnseenInit::Zero };
    let multitask = evaluate(&model, &cloner, &test);

    for (name, r) in [("meta", &meta), ("multitask", &multitask), ("meta-shared", &shared)] {
        let line: Vec<String> =
            r.marks.iter().map(|(k, m)| format!("{k}:{:.3}/{:.1}", m.similarity_mean, m.diagonal_rate)).collect();
        emit(&format!("  seed {seed} {name:<12} similarity/diagonal by mark {}", line.join(" ")));
    }
    SeedRun { meta, multitask, shared }
}

fn grid() -> &'static Vec<SeedRun> {
    static GRID: OnceLock<Vec<SeedRun>> = OnceLock::new();
    GRID.get_or_init(|| SEEDS.iter().map(|&s| seed_run(s)).collect())
}

fn sim(r: &MetricReport, mark: usize) -> f64 {
    r.marks[&mark].similarity_mean
}

#[test]
fn criterion_01_desk_scale_substitution() {
    // absolute MOS/EER values are out of reach; the suite must report
    // oracle-embedder metrics on synthetic data, never paper-scale numbers
    let g = grid();
    let ok = g.iter().all(|r| {
        [&r.meta, &r.multitask, &r.shared].iter().all(|m| {
            m.embedder == "oracle-embedder"
                && m.marks.values().all(|x| (0.0..=0.5 + 1e-12).contains(&x.eer) && (0.0..=1.0).contains(&x.roc_auc))
        })
    });
    report(1, ok, "metrics come from the analytic embedder on synthetic speakers; paper-scale MOS/EER not claimed");
    assert!(ok);
}

#[test]
fn criterion_02_meta_beats_multitask_at_five_and_ten_steps() {
    let g = grid();
    let mut gaps = Vec::new();
    for mark in [5, 10] {
        let meta = g.iter().map(|r| sim(&r.meta, mark)).sum::<f64>() / g.len() as f64;
        let mt = g.iter().map(|r| sim(&r.multitask, mark)).sum::<f64>() / g.len() as f64;
        gaps.push((mark, meta, mt));
    }
    let ok = gaps.iter().all(|&(_, a, b)| a - b >= 0.05);
    let detail: Vec<String> = gaps.iter().map(|(m, a, b)| format!("mark {m}: meta {a:.4} vs multitask {b:.4} (gap {:.4})", a - b)).collect();
    report(2, ok, &detail.join(", "));
    assert!(ok);
}

#[test]
fn criterion_03_diagonal_pattern() {
    let g = grid();
    let mut passed = 0;
    let mut detail = Vec::new();
    for (seed, r) in SEEDS.iter().zip(g) {
        let first_at = |rate: f64| r.multitask.marks.iter().find(|(_, m)| m.diagonal_rate >= rate - 1e-12).map(|(k, _)| *k);
        let meta_rate = r.meta.marks[&10].diagonal_rate;
        let mt_first = first_at(0.7);
        let ok = meta_rate >= 0.7 && mt_first.is_none_or(|k| k >= 50);
        passed += ok as usize;
        // informational: when multitask first matches meta's own mark-10 rate
        detail.push(format!(
            "seed {seed}: meta@10 {meta_rate:.2}, multitask first reaches 0.7 at {mt_first:?} and {meta_rate:.2} at {:?}",
            first_at(meta_rate)
        ));
    }
    report(3, passed >= 2, &format!("{passed}/3 seeds; {}", detail.join("; ")));
    assert!(passed >= 2);
}

#[test]
fn criterion_09_shared_embedding_saturates() {
    let g = grid();
    let mut passed = 0;
    let mut detail = Vec::new();
    for (seed, r) in SEEDS.iter().zip(g) {
        let shared_gain = sim(&r.shared, 100) - sim(&r.shared, 10);
        let table_gain = sim(&r.meta, 100) - sim(&r.meta, 10);
        passed += (shared_gain < table_gain) as usize;
        detail.push(format!("seed {seed}: shared gain {shared_gain:.4}, table gain {table_gain:.4}"));
    }
    // reported only: the paper-scale effect need not transfer to synthetic data
    report(9, passed >= 2, &format!("{passed}/3 seeds; {}", detail.join("; ")));
}

// ---------------------------------------------------------------------------
// 4. second-order MAML

fn flat(g: &[Tensor<f64>]) -> Vec<f64> {
    g.iter().flat_map(|t| t.data.iter().copied()).collect()
}

#[test]
fn criterion_04_second_order_maml() {
    let (corpus, model) = tiny_setup(3, 5);
    let params = model.init_params(&corpus.speaker_ids(), 17).unwrap();
    let n = params.set.n_scalars();
    let sampler = EpisodeSampler::new(&corpus).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let episodes: Vec<_> = (0..2).map(|_| sampler.sample(2, 2, &mut rng).unwrap()).collect();
    let tasks = task_data(&corpus, &episodes).unwrap();
    let learner = TtsLearner::new(&model, &params);
    let spec = InnerSpec { mask: ModuleMask::ALL, alpha: 0.05, steps: 3, clip: Some(0.5) };
    let f = |set: &ParamSet| meta_gradient(&learner, set, &tasks, &spec, Order::Second, 1).unwrap().query_loss.total;
    let g = flat(&meta_gradient(&learner, &params.set, &tasks, &spec, Order::Second, 1).unwrap().grad);
    let (mut checked, mut worst) = (0, 0.0f64);
    for idx in 0..n {
        let h = 1e-4;
        let mut p = params.set.clone();
        p.set_flat(idx, params.set.get_flat(idx) + h);
        let mut m = params.set.clone();
        m.set_flat(idx, params.set.get_flat(idx) - h);
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let scale = fd.abs().max(g[idx].abs());
        if scale < 1e-6 {
            continue;
        }
        worst = worst.max((g[idx] - fd).abs() / scale);
        checked += 1;
    }
    let fd_ok = n <= 100 && checked >= 20 && worst <= 1e-3;

    // F(w) = ((1-2a)w + 2a·s - q)^2 for one inner step: dF/dw carries the
    // (1-2a) Jacobian factor that first-order MAML drops
    let (alpha, w, s, q) = (0.1, 0.7, 1.0, 1.5);
    let quad = [TaskData { support: vec![&s], query: vec![&q] }];
    let qspec = InnerSpec { mask: ModuleMask::EMB, alpha, steps: 1, clip: None };
    let qp = QuadraticSurrogate::params(w);
    let g2 = meta_gradient(&QuadraticSurrogate, &qp, &quad, &qspec, Order::Second, 1).unwrap().grad[0].data[0];
    let g1 = meta_gradient(&QuadraticSurrogate, &qp, &quad, &qspec, Order::First, 1).unwrap().grad[0].data[0];
    let inner = (1.0 - 2.0 * alpha) * w + 2.0 * alpha * s - q;
    let (want2, want1) = (2.0 * (1.0 - 2.0 * alpha) * inner, 2.0 * inner);
    let quad_ok = (g2 - want2).abs() < 1e-12 && (g1 - want1).abs() < 1e-12 && (g1 - g2).abs() > 1e-3;

    report(
        4,
        fd_ok && quad_ok,
        &format!("{n} parameters, {checked} coordinates, worst rel. err {worst:.2e}; quadratic first {g1:.4} vs second {g2:.4}"),
    );
    assert!(fd_ok && quad_ok);
}

// ---------------------------------------------------------------------------
// 5. module selectivity

const MASKS: [ModuleMask; 4] = [ModuleMask::EMB, ModuleMask::EMB_VA, ModuleMask::EMB_DEC, ModuleMask::ALL];

fn selectivity_case(seed: u64, m: usize, steps: usize, shared: bool) -> Result<(), TestCaseError> {
    let corpus = generate_corpus(3, 10, seed, Split::Train, &tiny_corpus_config()).unwrap();
    let mode = if shared { EmbMode::Shared } else { EmbMode::Table };
    let model = FastSpeech::new(tiny_model_config(mode)).unwrap();
    let params = model.init_params(&corpus.speaker_ids(), seed).unwrap();
    let mask = MASKS[m];
    let spk = corpus.speaker_ids()[(seed % 3) as usize];
    let support: Vec<_> = corpus.utterances.iter().filter(|u| u.speaker_id == spk).take(5).collect();

    // (a) + (b) through every inner step
    for k in 1..=steps {
        let out = inner_adapt(&model, &params, &support, mask, 0.05, k, Some(1.0)).unwrap();
        for p in Partition::ALL {
            if !mask.adapts(p) {
                prop_assert!(out.set.partition_bits_equal(&params.set, p), "{p} moved at inner step {k} under {mask}");
            }
        }
    }
    // ... and every fine-tuning step of a cloning trajectory
    if !shared {
        let test = generate_corpus(2, 10, seed + 1, Split::Test, &tiny_corpus_config()).unwrap();
        let prepared = prepare_unseen(&params, &test.speaker_ids(), UnseenInit::Zero).unwrap();
        let task = &build_eval_tasks(&test, 1, 3, seed).unwrap()[0];
        let cfg = AdaptConfig { mask, marks: (0..=steps).collect(), lr: 0.05, clip: Some(1.0) };
        for snap in metatts::cloning::adapt_to_task(&model, &prepared, None, task, &test, &cfg).unwrap() {
            for p in Partition::ALL {
                if !mask.adapts(p) {
                    prop_assert!(snap.params.set.partition_bits_equal(&prepared.set, p), "{p} moved at fine-tune step {}", snap.mark);
                }
            }
        }
    }

    // (c) one meta-step moves everything, encoder included
    let cfg = MetaConfig { tasks_per_step: 2, k_shot: 2, inner_steps: 2, alpha: 0.05, beta: 1e-2, ..MetaConfig::default() };
    let sampler = EpisodeSampler::new(&corpus).unwrap();
    let eps = step_episodes(&sampler, &cfg, seed, 0).unwrap();
    let tasks = task_data(&corpus, &eps).unwrap();
    let learner = TtsLearner::new(&model, &params);
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &params.set);
    let (out, _) = meta_step(&learner, &params.set, &mut opt, &tasks, &cfg, mask, 1).unwrap();
    for p in Partition::ALL {
        prop_assert!(!out.partition_bits_equal(&params.set, p), "{p} unchanged after a meta-step");
    }
    Ok(())
}

#[test]
fn criterion_05_module_selectivity() {
    let cases = 64;
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let res = runner.run(&(0u64..10_000, 0usize..4, 1usize..4, any::<bool>()), |(seed, m, steps, shared)| {
        selectivity_case(seed, m, steps, shared)
    });
    report(5, res.is_ok(), &format!("{cases} randomized runs over masks, embedding modes and step counts: {res:?}"));
    res.unwrap();
}

// ---------------------------------------------------------------------------
// 6. metric oracles

fn brute_points(s: &ScoreSet) -> Vec<(f64, f64)> {
    let p = s.scores.iter().filter(|x| x.1 == Label::Positive).count() as f64;
    let n = s.scores.len() as f64 - p;
    let mut ts: Vec<f64> = s.scores.iter().map(|x| x.0).collect();
    ts.push(f64::NEG_INFINITY);
    ts.iter()
        .map(|&t| {
            let fa = s.scores.iter().filter(|x| x.1 == Label::Negative && x.0 > t).count() as f64;
            let fr = s.scores.iter().filter(|x| x.1 == Label::Positive && x.0 <= t).count() as f64;
            (fa / n, fr / p)
        })
        .collect()
}

/// Where FAR = FRR first touches the convex hull of the operating points.
fn brute_eer(s: &ScoreSet) -> f64 {
    let pts = brute_points(s);
    let mut best = f64::INFINITY;
    for a in &pts {
        for b in &pts {
            let (da, db) = (a.1 - a.0, b.1 - b.0);
            if da == 0.0 {
                best = best.min(a.0);
            }
            if da > 0.0 && db < 0.0 {
                let t = da / (da - db);
                best = best.min(a.0 + t * (b.0 - a.0));
            }
        }
    }
    best
}

fn brute_auc(s: &ScoreSet) -> (u128, u128) {
    let pos: Vec<f64> = s.scores.iter().filter(|x| x.1 == Label::Positive).map(|x| x.0).collect();
    let neg: Vec<f64> = s.scores.iter().filter(|x| x.1 == Label::Negative).map(|x| x.0).collect();
    let twice: u128 = pos.iter().flat_map(|a| neg.iter().map(move |b| if a > b { 2 } else if a == b { 1 } else { 0 })).sum();
    (twice, 2 * (pos.len() * neg.len()) as u128)
}

fn score_set(v: &[(i32, bool)]) -> ScoreSet {
    let mut s = ScoreSet::new(ScoreContext::Verification);
    for &(x, pos) in v {
        s.push(x as f64 / 4.0, if pos { Label::Positive } else { Label::Negative });
    }
    s
}

#[test]
fn criterion_06_metric_oracles() {
    let strategy = prop::collection::vec((0i32..8, any::<bool>()), 2..=12)
        .prop_filter("both labels", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1));
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let oracle = runner.run(&strategy, |v| {
        let s = score_set(&v);
        let (got, want) = (compute_eer(&s).unwrap().eer, brute_eer(&s));
        prop_assert!((got - want).abs() <= 1e-12, "EER {got} vs {want}");
        let c = roc_auc_counts(&s).unwrap();
        let (tw, d) = brute_auc(&s);
        prop_assert_eq!(c.twice_wins as u128 * d, tw * c.denom as u128);
        Ok(())
    });
    let mut runner = TestRunner::new(Config { cases: 200, failure_persistence: None, ..Config::default() });
    let symmetric = runner.run(&prop::collection::vec(0i32..8, 1..=6), |xs| {
        let v: Vec<(i32, bool)> = xs.iter().flat_map(|&x| [(x, true), (x, false)]).collect();
        prop_assert_eq!(roc_auc(&score_set(&v)).unwrap(), 0.5);
        Ok(())
    });
    let ok = oracle.is_ok() && symmetric.is_ok();
    report(6, ok, &format!("1000 random sets vs exhaustive oracles: {oracle:?}; label-symmetric AUC = 0.5: {symmetric:?}"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 7. model numerics

fn with_random_store(params: &mut ModelParameters, seed: u64) {
    let idx = params.spk_store_index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut params.set.values[idx].data {
        *v = rng.random_range(-0.5..0.5);
    }
}

#[test]
fn criterion_07_model_numerics() {
    let corpus = generate_corpus(3, 10, 11, Split::Train, &CorpusConfig::default()).unwrap();
    let model = FastSpeech::new(small_model_config(EmbMode::Table)).unwrap();
    let mut params = model.init_params(&corpus.speaker_ids(), 1).unwrap();
    with_random_store(&mut params, 2);
    let batch: Vec<_> = corpus.by_speaker().values().map(|idx| &corpus.utterances[idx[0]]).collect();
    let (_, grads) = model.loss_grad(&params, &batch, false).unwrap();
    let g = flat(&grads);
    let loss = |set: &ParamSet| {
        let p = ModelParameters { set: set.clone(), ..params.clone() };
        model.batch_loss(&p, &batch).unwrap().total
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = params.set.n_scalars();
    let mut per: BTreeMap<Partition, (usize, f64)> = BTreeMap::new();
    let mut tries = 0;
    while per.len() < 4 || per.values().any(|c| c.0 < 20) {
        tries += 1;
        assert!(tries < 20_000, "not enough coordinates with gradient signal: {per:?}");
        let idx = rng.random_range(0..n);
        let part = params.set.locate_flat(idx).1;
        if per.get(&part).is_some_and(|c| c.0 >= 20) {
            continue;
        }
        let h = 1e-6;
        let mut p = params.set.clone();
        p.set_flat(idx, params.set.get_flat(idx) + h);
        let mut m = params.set.clone();
        m.set_flat(idx, params.set.get_flat(idx) - h);
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let scale = fd.abs().max(g[idx].abs());
        if scale < 1e-5 {
            continue;
        }
        let e = per.entry(part).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max((g[idx] - fd).abs() / scale);
    }
    let grad_ok = per.values().all(|&(_, w)| w <= 1e-3);

    let fmodel = FastSpeech::new(tiny_model_config(EmbMode::Shared)).unwrap();
    let fparams = fmodel.init_params(&[], 0).unwrap();
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let shapes = runner.run(&prop::collection::vec((0usize..4, 1usize..6, 55.0f64..78.0, 0.4f64..2.2), 1..=12), |ph| {
        let phonemes: Vec<usize> = ph.iter().map(|x| x.0).collect();
        let durations: Vec<usize> = ph.iter().map(|x| x.1).collect();
        let pitch: Vec<f64> = ph.iter().map(|x| x.2).collect();
        let energy: Vec<f64> = ph.iter().map(|x| x.3).collect();
        let frames: usize = durations.iter().sum();
        let t = VarianceTargets { durations: &durations, pitch: &pitch, energy: &energy };
        let out = fmodel.forward(&fparams, &ModelInput { phonemes: &phonemes, speaker: SpeakerRef::Id(0) }, Some(t)).unwrap();
        prop_assert_eq!(out.mel_pred.rows, frames);
        prop_assert_eq!(out.mel_pred.cols, 2);
        prop_assert_eq!(&out.durations, &durations);
        prop_assert_eq!(out.pitch_pred.len(), phonemes.len());
        let h = Tensor::from_vec(phonemes.len(), 2, ph.iter().flat_map(|x| [x.2, x.3]).collect());
        let r = length_regulate(&h, &durations).unwrap();
        prop_assert_eq!(r.rows, frames);
        let mut frame = 0;
        for (i, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                prop_assert_eq!(r.row(frame), h.row(i));
                frame += 1;
            }
        }
        Ok(())
    });
    let ok = grad_ok && shapes.is_ok();
    let detail: Vec<String> = per.iter().map(|(p, (c, w))| format!("{p} {c} coords worst {w:.1e}")).collect();
    report(7, ok, &format!("{}; 1000 frame-budget/length-regulator cases: {shapes:?}", detail.join(", ")));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 8. oracle soundness

#[test]
fn criterion_08_oracle_soundness() {
    let exact = CorpusConfig { noise_std: 0.0, ..CorpusConfig::default() };
    let templates = PhonemeTemplates::new(&exact);
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let spk = make_speaker(0, seed, &exact).unwrap();
        let phonemes: Vec<usize> = (0..12).map(|i| (i * 5 + seed as usize) % exact.n_phonemes).collect();
        let u = render_utterance(0, &spk, &phonemes, seed, &exact, &templates).unwrap();
        let (ds, po, es, timbre) = oracle_embed((&u).into(), &templates).unwrap().to_latents();
        // the duration recovered from rounded frame counts
        let rounded = phonemes
            .iter()
            .map(|&p| {
                let base = (2 + p % 3) as f64;
                (base * spk.duration_scale).round().max(1.0) / base
            })
            .sum::<f64>()
            / phonemes.len() as f64;
        assert_eq!(base_duration(phonemes[0]), 2 + phonemes[0] % 3);
        worst = worst.max((ds - rounded).abs()).max((po - spk.pitch_offset).abs()).max((es - spk.energy_scale).abs());
        for (a, b) in timbre.iter().zip(&spk.timbre) {
            worst = worst.max((a - b).abs());
        }
    }
    let invert_ok = worst <= 1e-9;

    let mut runner = TestRunner::new(Config { cases: 40, failure_persistence: None, ..Config::default() });
    let sep = runner.run(&(0u64..100_000, 2usize..6, prop::sample::select(vec![0.0, 0.01, 0.05])), |(seed, n, noise)| {
        let cfg = CorpusConfig { noise_std: noise, ..CorpusConfig::default() };
        let c = generate_corpus(n, 10, seed, Split::Train, &cfg).unwrap();
        let t = PhonemeTemplates::new(&cfg);
        let embs: Vec<(u32, Vec<f64>)> = c.utterances.iter().map(|u| (u.speaker_id, oracle_embed(u.into(), &t).unwrap().0)).collect();
        let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
        for (i, a) in embs.iter().enumerate() {
            for b in &embs[i + 1..] {
                let s = cosine_similarity(&a.1, &b.1).unwrap();
                let acc = if a.0 == b.0 { &mut intra } else { &mut inter };
                acc.0 += s;
                acc.1 += 1;
            }
        }
        let (mi, mo) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
        prop_assert!(mi > mo, "intra {mi} <= inter {mo}");
        Ok(())
    });
    let ok = invert_ok && sep.is_ok();
    report(8, ok, &format!("zero-noise inversion worst error {worst:.1e}; intra > inter on 40 random corpora: {sep:?}"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 10. determinism

fn pipeline_bytes(workers: usize) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
    let cc = CorpusConfig { k_shot: 2, ..CorpusConfig::default() };
    let train = generate_corpus(4, 8, 41, Split::Train, &cc).unwrap();
    let test = generate_corpus(3, 8, 42, Split::Test, &cc).unwrap();
    let model = FastSpeech::new(small_model_config(EmbMode::Table)).unwrap();
    let opts = RunOptions { workers, checkpoint_dir: None };
    let mcfg = MetaConfig { total_meta_steps: 3, tasks_per_step: 2, k_shot: 2, inner_steps: 2, optimizer: OptimizerKind::adam(), ..MetaConfig::default() };
    let state = TrainState::init(&model, &train, mcfg.optimizer, 7).unwrap();
    let state = meta_train(&model, &train, &mcfg, ModuleMask::ALL, 7, state, &opts, &mut |_| {}).unwrap();
    let meta_ck = meta_checkpoint(&model, &state, &mcfg, ModuleMask::ALL, 7).to_bytes().unwrap();

    let bcfg = BaselineConfig { steps: 3, batch_size: 8, ..BaselineConfig::default() };
    let mstate = TrainState::init(&model, &train, bcfg.optimizer, 7).unwrap();
    let mstate = train_multitask(&model, &train, &bcfg, 7, mstate, &opts, &mut |_| {}).unwrap();
    let mt_ck = multitask_checkpoint(&model, &mstate, &bcfg, 7).to_bytes().unwrap();

    let tasks = build_eval_tasks(&test, 2, 2, 5).unwrap();
    let hash = manifest_hash(&tasks).unwrap();
    let acfg = AdaptConfig { marks: vec![0, 1, 3], ..AdaptConfig::default() };
    let mut reports = Vec::new();
    for (name, p, mask) in [("meta", &state.params, Some(ModuleMask::ALL)), ("multitask", &mstate.params, None)] {
        let cloner = Cloner::Adaptation { approach: name.into(), params: p, meta_mask: mask, init: UnseenInit::Zero };
        let results = run_sweep(&model, &cloner, &test, &tasks, &hash, &acfg, workers).unwrap();
        reports.push(to_precise_json(&build_report(&results, &test, &ReportConfig::default(), serde_json::Value::Null).unwrap()).unwrap());
    }
    let mt_report = reports.pop().unwrap();
    (meta_ck, mt_ck, reports.pop().unwrap(), mt_report)
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let a = pipeline_bytes(1);
    let b = pipeline_bytes(1);
    let c = pipeline_bytes(2);
    let ok = a == b && a == c;
    report(10, ok, "checkpoints and reports byte-identical across two runs and across worker counts");
    assert!(ok);
}

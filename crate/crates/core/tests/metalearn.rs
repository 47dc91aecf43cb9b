mod common;

use common::*;
use metatts::corpus::{generate_corpus, CorpusConfig, Split, Utterance};
use metatts::episodes::EpisodeSampler;
use metatts::metalearn::*;
use metatts::model::{EmbMode, FastSpeech, ModelParameters, ParamSet, Partition};
use metatts::optim::{Optimizer, OptimizerKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn meta_loss(learner: &TtsLearner<'_>, set: &ParamSet, tasks: &[TaskData<'_, Utterance>], spec: &InnerSpec) -> f64 {
    meta_gradient(learner, set, tasks, spec, Order::Second, 1).unwrap().query_loss.total
}

fn perturbed(set: &ParamSet, idx: usize, d: f64) -> ParamSet {
    let mut s = set.clone();
    s.set_flat(idx, s.get_flat(idx) + d);
    s
}

fn flat_grad(g: &[metatts::tensor::Tensor<f64>], mut idx: usize) -> f64 {
    for t in g {
        if idx < t.len() {
            return t.data[idx];
        }
        idx -= t.len();
    }
    unreachable!()
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let (corpus, model) = tiny_setup(3, 5);
    let params = model.init_params(&corpus.speaker_ids(), 17).unwrap();
    assert!(params.set.n_scalars() <= 100, "{} parameters", params.set.n_scalars());
    let sampler = EpisodeSampler::new(&corpus).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let episodes: Vec<_> = (0..2).map(|_| sampler.sample(2, 2, &mut rng).unwrap()).collect();
    let tasks = task_data(&corpus, &episodes).unwrap();
    let learner = TtsLearner::new(&model, &params);
    // a tight inner clip keeps the clip Jacobian in play
    let spec = InnerSpec { mask: ModuleMask::ALL, alpha: 0.05, steps: 3, clip: Some(0.5) };
    let g = meta_gradient(&learner, &params.set, &tasks, &spec, Order::Second, 1).unwrap().grad;

    let n = params.set.n_scalars();
    let mut checked = 0;
    let mut per_partition = std::collections::BTreeMap::new();
    for idx in 0..n {
        let h = 1e-4;
        let fp = meta_loss(&learner, &perturbed(&params.set, idx, h), &tasks, &spec);
        let fm = meta_loss(&learner, &perturbed(&params.set, idx, -h), &tasks, &spec);
        let fd = (fp - fm) / (2.0 * h);
        let an = flat_grad(&g, idx);
        if fd.abs().max(an.abs()) < 1e-6 {
            continue;
        }
        let rel = (an - fd).abs() / fd.abs().max(an.abs());
        assert!(rel <= 1e-3, "coordinate {idx} ({:?}): analytic {an} vs fd {fd}, rel {rel}", params.set.locate_flat(idx));
        checked += 1;
        *per_partition.entry(params.set.locate_flat(idx).1).or_insert(0) += 1;
    }
    assert!(checked >= 20, "only {checked} coordinates had signal");
    assert!(per_partition.contains_key(&Partition::Encoder));
}

#[test]
fn first_order_differs_from_second_order_on_the_model() {
    let (corpus, model) = tiny_setup(3, 8);
    let params = model.init_params(&corpus.speaker_ids(), 1).unwrap();
    let sampler = EpisodeSampler::new(&corpus).unwrap();
    let ep = sampler.sample(3, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tasks = task_data(&corpus, &[ep]).unwrap();
    let learner = TtsLearner::new(&model, &params);
    let spec = InnerSpec { mask: ModuleMask::ALL, alpha: 0.1, steps: 2, clip: None };
    let a = meta_gradient(&learner, &params.set, &tasks, &spec, Order::First, 1).unwrap().grad;
    let b = meta_gradient(&learner, &params.set, &tasks, &spec, Order::Second, 1).unwrap().grad;
    let diff: f64 = a.iter().zip(&b).flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs())).sum();
    assert!(diff > 1e-6);
}

#[test]
fn single_step_embedding_update_matches_finite_differences() {
    let (corpus, model) = tiny_setup(2, 2);
    let params = model.init_params(&corpus.speaker_ids(), 4).unwrap();
    let utt = &corpus.utterances[0];
    let alpha = 0.1;
    let adapted = inner_adapt(&model, &params, &[utt], ModuleMask::EMB, alpha, 1, None).unwrap();
    let store = params.spk_store_index();
    let offset: usize = params.set.values[..store].iter().map(|t| t.len()).sum();
    let row = params.speaker_row(utt.speaker_id).unwrap();
    let cols = params.spk_store().cols;
    let loss = |p: &ModelParameters| model.batch_loss(p, &[utt]).unwrap().total;
    for c in 0..cols {
        let idx = offset + row * cols + c;
        let h = 1e-6;
        let mut pp = params.clone();
        pp.set.set_flat(idx, params.set.get_flat(idx) + h);
        let mut pm = params.clone();
        pm.set.set_flat(idx, params.set.get_flat(idx) - h);
        let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
        let want = params.set.get_flat(idx) - alpha * fd;
        let got = adapted.set.get_flat(idx);
        let step = (got - params.set.get_flat(idx)).abs();
        assert!((got - want).abs() <= 1e-4 * step.max(1e-12), "col {c}: {got} vs {want}");
    }
}

#[test]
fn alpha_zero_and_empty_support() {
    let (corpus, model) = tiny_setup(2, 3);
    let params = model.init_params(&corpus.speaker_ids(), 0).unwrap();
    let support: Vec<&Utterance> = corpus.utterances.iter().take(3).collect();
    let out = inner_adapt(&model, &params, &support, ModuleMask::ALL, 0.0, 5, Some(1.0)).unwrap();
    assert_eq!(out, params);
    assert!(inner_adapt(&model, &params, &[], ModuleMask::ALL, 0.1, 1, None).is_err());
}

#[test]
fn inner_adapt_does_not_touch_the_input_and_errors_on_unknown_speaker() {
    let (corpus, model) = tiny_setup(2, 3);
    let params = model.init_params(&corpus.speaker_ids()[..1], 0).unwrap();
    let snapshot = params.clone();
    let own: Vec<&Utterance> = corpus.utterances.iter().filter(|u| u.speaker_id == corpus.speaker_ids()[0]).take(2).collect();
    inner_adapt(&model, &params, &own, ModuleMask::ALL, 0.1, 2, None).unwrap();
    assert_eq!(params, snapshot);
    let other: Vec<&Utterance> = corpus.utterances.iter().filter(|u| u.speaker_id == corpus.speaker_ids()[1]).take(2).collect();
    assert!(inner_adapt(&model, &params, &other, ModuleMask::ALL, 0.1, 1, None).is_err());
}

const MASKS: [ModuleMask; 4] = [ModuleMask::EMB, ModuleMask::EMB_VA, ModuleMask::EMB_DEC, ModuleMask::ALL];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_partitions_are_bit_identical(seed in 0u64..1000, m in 0usize..4, steps in 1usize..4, shared in any::<bool>()) {
        let corpus = generate_corpus(2, 10, seed, Split::Train, &tiny_corpus_config()).unwrap();
        let mode = if shared { EmbMode::Shared } else { EmbMode::Table };
        let model = FastSpeech::new(tiny_model_config(mode)).unwrap();
        let params = model.init_params(&corpus.speaker_ids(), seed).unwrap();
        let mask = MASKS[m];
        let spk = corpus.speaker_ids()[(seed % 2) as usize];
        let support: Vec<&Utterance> = corpus.utterances.iter().filter(|u| u.speaker_id == spk).take(5).collect();
        let out = inner_adapt(&model, &params, &support, mask, 0.05, steps, Some(1.0)).unwrap();
        for p in Partition::ALL {
            let same = out.set.partition_bits_equal(&params.set, p);
            if mask.adapts(p) {
                prop_assert!(!same, "{p} did not move under {mask}");
            } else {
                prop_assert!(same, "{p} moved under {mask}");
            }
        }
        prop_assert!(out.set.partition_bits_equal(&params.set, Partition::Encoder));
    }

    #[test]
    fn meta_step_moves_every_partition(seed in 0u64..1000, m in 0usize..4, second in any::<bool>()) {
        let corpus = generate_corpus(3, 10, seed, Split::Train, &tiny_corpus_config()).unwrap();
        let model = FastSpeech::new(tiny_model_config(EmbMode::Table)).unwrap();
        let params = model.init_params(&corpus.speaker_ids(), seed).unwrap();
        let cfg = MetaConfig {
            tasks_per_step: 2, k_shot: 2, inner_steps: 2, alpha: 0.05, beta: 1e-2,
            order: if second { Order::Second } else { Order::First },
            ..MetaConfig::default()
        };
        let sampler = EpisodeSampler::new(&corpus).unwrap();
        let eps = step_episodes(&sampler, &cfg, seed, 0).unwrap();
        let tasks = task_data(&corpus, &eps).unwrap();
        let learner = TtsLearner::new(&model, &params);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &params.set);
        let before = params.clone();
        let (out, _) = meta_step(&learner, &params.set, &mut opt, &tasks, &cfg, MASKS[m], 1).unwrap();
        prop_assert_eq!(&params, &before);
        for p in Partition::ALL {
            prop_assert!(!out.partition_bits_equal(&params.set, p), "{} unchanged", p);
        }
    }
}

fn desk_setup(seed: u64) -> (metatts::corpus::Corpus, FastSpeech) {
    let corpus = generate_corpus(8, 12, seed, Split::Train, &CorpusConfig::default()).unwrap();
    (corpus, FastSpeech::new(small_model_config(EmbMode::Table)).unwrap())
}

fn run(model: &FastSpeech, corpus: &metatts::corpus::Corpus, cfg: &MetaConfig, seed: u64, state: TrainState) -> (TrainState, Vec<StepRecord>) {
    let mut log = Vec::new();
    let out = meta_train(model, corpus, cfg, ModuleMask::ALL, seed, state, &RunOptions::default(), &mut |r| log.push(r.clone())).unwrap();
    (out, log)
}

#[test]
fn two_steps_reproduce_and_resume_is_bit_exact() {
    let (corpus, model) = desk_setup(1);
    let cfg = MetaConfig { total_meta_steps: 3, tasks_per_step: 2, optimizer: OptimizerKind::adam(), ..MetaConfig::default() };
    let init = || TrainState::init(&model, &corpus, cfg.optimizer, 9).unwrap();
    let (a, la) = run(&model, &corpus, &MetaConfig { total_meta_steps: 2, ..cfg.clone() }, 9, init());
    let (b, lb) = run(&model, &corpus, &MetaConfig { total_meta_steps: 2, ..cfg.clone() }, 9, init());
    let losses = |l: &[StepRecord]| l.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
    assert_eq!(a, b);

    // checkpoint after step 2, reload, run step 3; compare with an uninterrupted run
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    meta_checkpoint(&model, &a, &cfg, ModuleMask::ALL, 9).save(&path).unwrap();
    let ck = metatts::model::checkpoint::Checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint_meta_mask(&ck).unwrap(), Some(ModuleMask::ALL));
    let resumed = TrainState::from_checkpoint(&ck, cfg.optimizer).unwrap();
    assert_eq!(resumed, a);
    let (c, lc) = run(&model, &corpus, &cfg, 9, resumed);
    let (full, lf) = run(&model, &corpus, &cfg, 9, init());
    assert_eq!(c, full);
    assert_eq!(lc[0].loss.to_bits(), lf[2].loss.to_bits());
}

#[test]
fn meta_loss_trends_down_over_200_steps() {
    let (corpus, model) = desk_setup(4);
    let cfg = MetaConfig { total_meta_steps: 200, tasks_per_step: 4, optimizer: OptimizerKind::adam(), ..MetaConfig::default() };
    let (_, log) = run(&model, &corpus, &cfg, 2, TrainState::init(&model, &corpus, cfg.optimizer, 2).unwrap());
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&log[..50]), mean(&log[150..]));
    assert!(last < first, "first-50 mean {first}, last-50 mean {last}");
}

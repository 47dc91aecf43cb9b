//! Non-meta references: multi-task training of the multi-speaker model, and
//! speaker-encoding TTS where an utterance-level encoder replaces the
//! embedding store.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, oracle_embed, Corpus, CorpusConfig, PhonemeTemplates, Split, Utterance};
use crate::error::{Error, Result};
use crate::io::mix_seed;
use crate::metalearn::{checkpoint_path, RunOptions, StepRecord, TrainState};
use crate::model::checkpoint::{Checkpoint, ExtraTensor};
use crate::model::params::vecops;
use crate::model::{FastSpeech, LossBreakdown, ModelParameters, ParamMeta, ParamSet, Partition, SpeakerNode};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub lr: f64,
    pub steps: usize,
    /// Utterances per step; matches the meta-learner's `M·2K`.
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { lr: 1e-3, steps: 2000, batch_size: 80, clip: Some(1.0), optimizer: OptimizerKind::Sgd, checkpoint_every: 0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        self.optimizer.validate()
    }
}

/// Mixed-speaker batch for step `step`: `n` distinct utterances drawn
/// uniformly from the whole corpus.
pub fn sample_batch(corpus: &Corpus, n: usize, seed: u64, step: usize) -> Result<Vec<&Utterance>> {
    if n > corpus.utterances.len() {
        return Err(Error::Input(format!("batch of {n} exceeds the corpus ({} utterances)", corpus.utterances.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0xBA7C), step as u64));
    Ok(index::sample(&mut rng, corpus.utterances.len(), n).into_iter().map(|i| &corpus.utterances[i]).collect())
}

/// One gradient step on the summed loss of `batch`; returns the new
/// parameters, the mean per-utterance loss and the pre-clip gradient norm.
pub fn multitask_step(
    model: &FastSpeech,
    params: &ModelParameters,
    opt: &mut Optimizer,
    batch: &[&Utterance],
    lr: f64,
    clip: Option<f64>,
) -> Result<(ModelParameters, LossBreakdown, f64)> {
    let (loss, mut grads) = model.loss_grad(params, batch, true)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric("non-finite multi-task loss".into()));
    }
    let mut out = params.clone();
    let norm = opt.apply(&mut out.set, &mut grads, lr, clip);
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite multi-task gradient".into()));
    }
    let mut mean = LossBreakdown::default();
    mean.accumulate(&loss, 1.0 / batch.len() as f64);
    Ok((out, mean, norm))
}

fn baseline_info(approach: &str, cfg: &BaselineConfig, seed: u64, step: usize) -> BTreeMap<String, serde_json::Value> {
    let mut info = BTreeMap::new();
    info.insert("approach".into(), serde_json::json!(approach));
    info.insert("baseline_config".into(), serde_json::to_value(cfg).expect("config serializes"));
    info.insert("seed".into(), serde_json::json!(seed));
    info.insert("step".into(), serde_json::json!(step));
    info.insert("rng".into(), serde_json::json!({ "scheme": "chacha8-per-step", "seed": seed, "next_step": step }));
    info
}

pub fn multitask_checkpoint(model: &FastSpeech, state: &TrainState, cfg: &BaselineConfig, seed: u64) -> Checkpoint {
    state.to_checkpoint(model, baseline_info("multitask", cfg, seed, state.step))
}

/// Multi-task training from `state` up to `cfg.steps`.
#[allow(clippy::too_many_arguments)]
pub fn train_multitask(
    model: &FastSpeech,
    corpus: &Corpus,
    cfg: &BaselineConfig,
    seed: u64,
    mut state: TrainState,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    model.config().matches_corpus(&corpus.config)?;
    model.check_params(&state.params)?;
    while state.step < cfg.steps {
        let t0 = Instant::now();
        let batch = sample_batch(corpus, cfg.batch_size, seed, state.step)?;
        let (params, loss, norm) = multitask_step(model, &state.params, &mut state.optimizer, &batch, cfg.lr, cfg.clip)?;
        state.params = params;
        state.step += 1;
        on_step(&StepRecord::new(state.step, &loss, norm, t0.elapsed().as_secs_f64() * 1e3));
        if let Some(dir) = &opts.checkpoint_dir {
            if (cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every)) || state.step == cfg.steps {
                multitask_checkpoint(model, &state, cfg, seed).save(&checkpoint_path(dir, "multitask", state.step))?;
            }
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Speaker encoding

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSetting {
    /// Mel-pooling encoder trained jointly from random init.
    ScratchJoint,
    /// Frozen embedder (the analytic oracle, or a supplied frozen encoder)
    /// with a jointly trained projection.
    FixedOracle,
    /// Mel-pooling encoder regressed onto oracle targets first, then trained jointly.
    PretrainedJoint,
}

impl EncoderSetting {
    pub const ALL: [EncoderSetting; 3] = [EncoderSetting::ScratchJoint, EncoderSetting::FixedOracle, EncoderSetting::PretrainedJoint];

    pub fn approach_tag(&self) -> String {
        format!("spk_enc:{self}")
    }
}

impl fmt::Display for EncoderSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderSetting::ScratchJoint => "scratch_joint",
            EncoderSetting::FixedOracle => "fixed_oracle",
            EncoderSetting::PretrainedJoint => "pretrained_joint",
        })
    }
}

impl FromStr for EncoderSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderSetting::ALL
            .into_iter()
            .find(|e| e.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder setting {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Held-out synthetic speakers for the regression pre-phase.
    pub pretrain_speakers: usize,
    pub pretrain_utts_per_speaker: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            pretrain_steps: 500,
            pretrain_lr: 1e-2,
            pretrain_batch: 16,
            pretrain_speakers: 20,
            pretrain_utts_per_speaker: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Net {
    Oracle,
    Mlp { frozen: bool },
}

/// Utterance → speaker vector. The network produces a `3 + C_mel`
/// utterance embedding; a bias-free projection maps it to the TTS speaker
/// dimension.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub setting: EncoderSetting,
    net: Net,
    pub params: ParamSet,
    templates: PhonemeTemplates,
    n_mel: usize,
}

const L1_W: &str = "spk_enc.l1.w";
const L1_B: &str = "spk_enc.l1.b";
const L2_W: &str = "spk_enc.l2.w";
const L2_B: &str = "spk_enc.l2.b";
const PROJ: &str = "spk_enc.proj";

fn tag(name: &str, rows: usize, cols: usize) -> ParamMeta {
    // the encoder takes the embedding store's role, so it carries that tag
    ParamMeta { name: name.into(), partition: Partition::SpeakerStore, rows, cols }
}

impl SpeakerEncoder {
    /// Fresh encoder for `setting`. `frozen` substitutes a supplied frozen
    /// embedder for the oracle in the fixed setting.
    pub fn new(
        setting: EncoderSetting,
        corpus: &Corpus,
        spk_emb_dim: usize,
        cfg: &EncoderConfig,
        frozen: Option<&SpeakerEncoder>,
        seed: u64,
    ) -> Result<Self> {
        let n_mel = corpus.config.n_mel;
        let d = corpus.config.embedding_dim();
        let templates = PhonemeTemplates::new(&corpus.config);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5E7C));
        let mut xavier = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-a..a)).collect())
        };
        let mlp = |xavier: &mut dyn FnMut(usize, usize) -> Tensor<f64>| {
            let h = cfg.hidden_dim;
            (
                vec![tag(L1_W, n_mel, h), tag(L1_B, 1, h), tag(L2_W, h, d), tag(L2_B, 1, d)],
                vec![xavier(n_mel, h), Tensor::zeros(1, h), xavier(h, d), Tensor::zeros(1, d)],
            )
        };
        let (net, mut meta, mut values) = match setting {
            EncoderSetting::FixedOracle => match frozen {
                Some(f) => {
                    if f.net == Net::Oracle {
                        return Err(Error::Config("a supplied frozen encoder must be a trained network".into()));
                    }
                    let k = 4;
                    (Net::Mlp { frozen: true }, f.params.meta()[..k].to_vec(), f.params.values[..k].to_vec())
                }
                None => {
                    if !corpus.is_synthetic() {
                        return Err(Error::Config(
                            "fixed_oracle needs a synthetic corpus with speaker latents or a supplied frozen encoder".into(),
                        ));
                    }
                    (Net::Oracle, Vec::new(), Vec::new())
                }
            },
            EncoderSetting::ScratchJoint | EncoderSetting::PretrainedJoint => {
                let (m, v) = mlp(&mut xavier);
                (Net::Mlp { frozen: false }, m, v)
            }
        };
        meta.push(tag(PROJ, d, spk_emb_dim));
        values.push(xavier(d, spk_emb_dim));
        Ok(Self { setting, net, params: ParamSet::new(meta, values), templates, n_mel })
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.values.last().expect("projection").rows
    }

    /// Per-tensor trainability.
    pub fn trainable(&self) -> Vec<bool> {
        let n = self.params.len();
        match self.net {
            Net::Mlp { frozen: false } => vec![true; n],
            _ => (0..n).map(|i| i == n - 1).collect(),
        }
    }

    /// Speaker-vector graph for one reference utterance.
    pub fn vector_graph(&self, tape: &mut Tape<f64>, q: &[Var], utt: &Utterance) -> Result<Var> {
        let emb = self.embedding_graph(tape, q, utt)?;
        Ok(tape.matmul(emb, q[q.len() - 1]))
    }

    fn embedding_graph(&self, tape: &mut Tape<f64>, q: &[Var], utt: &Utterance) -> Result<Var> {
        if utt.n_mel != self.n_mel {
            return Err(Error::Input(format!("reference has {} mel channels, encoder expects {}", utt.n_mel, self.n_mel)));
        }
        Ok(match self.net {
            Net::Oracle => {
                let e = oracle_embed(utt.into(), &self.templates)?;
                tape.constant(Tensor::row_vector(e.0))
            }
            Net::Mlp { .. } => {
                if utt.n_frames() == 0 {
                    return Err(Error::Input("reference utterance has no frames".into()));
                }
                let mel = tape.constant(Tensor::from_vec(utt.n_frames(), utt.n_mel, utt.mel.clone()));
                let pooled = tape.column_mean(mel);
                let h = tape.matmul(pooled, q[0]);
                let h = tape.add_row(h, q[1]);
                let h = tape.silu(h);
                let o = tape.matmul(h, q[2]);
                tape.add_row(o, q[3])
            }
        })
    }

    fn leaves(&self, tape: &mut Tape<f64>) -> Vec<Var> {
        self.params.values.iter().zip(self.trainable()).map(|(t, tr)| tape.leaf(t.clone(), tr)).collect()
    }

    /// The `3 + C_mel` utterance embedding before projection.
    pub fn utterance_embedding(&self, utt: &Utterance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let q = self.leaves(&mut tape);
        let e = self.embedding_graph(&mut tape, &q, utt)?;
        Ok(tape.value(e).data.clone())
    }

    /// Speaker vector of a single reference.
    pub fn speaker_vector(&self, utt: &Utterance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let q = self.leaves(&mut tape);
        let v = self.vector_graph(&mut tape, &q, utt)?;
        Ok(tape.value(v).data.clone())
    }

    pub fn to_extra(&self) -> Vec<ExtraTensor> {
        self.params.meta().iter().zip(&self.params.values).map(|(m, v)| ExtraTensor { name: m.name.clone(), value: v.clone() }).collect()
    }

    pub fn info(&self) -> serde_json::Value {
        serde_json::json!({
            "setting": self.setting.to_string(),
            "net": match self.net { Net::Oracle => "oracle", Net::Mlp { frozen: true } => "frozen_mlp", Net::Mlp { frozen: false } => "mlp" },
        })
    }

    /// Rebuild the encoder stored in a speaker-encoding checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, corpus: &Corpus) -> Result<Self> {
        let info = ck.info.get("speaker_encoder").ok_or_else(|| Error::Config("checkpoint has no speaker encoder".into()))?;
        let setting: EncoderSetting = info["setting"].as_str().unwrap_or_default().parse()?;
        let net = match info["net"].as_str() {
            Some("oracle") => Net::Oracle,
            Some("frozen_mlp") => Net::Mlp { frozen: true },
            Some("mlp") => Net::Mlp { frozen: false },
            other => return Err(Error::Config(format!("unknown speaker encoder network {other:?}"))),
        };
        let names: &[&str] = if net == Net::Oracle { &[PROJ] } else { &[L1_W, L1_B, L2_W, L2_B, PROJ] };
        let mut meta = Vec::new();
        let mut values = Vec::new();
        for &n in names {
            let t = ck.extra(n).ok_or_else(|| Error::Config(format!("checkpoint lacks {n}")))?;
            meta.push(tag(n, t.rows, t.cols));
            values.push(t.clone());
        }
        let enc = Self { setting, net, params: ParamSet::new(meta, values), templates: PhonemeTemplates::new(&corpus.config), n_mel: corpus.config.n_mel };
        if enc.embedding_dim() != corpus.config.embedding_dim() {
            return Err(Error::Config("speaker encoder does not match the corpus mel dimension".into()));
        }
        Ok(enc)
    }
}

/// Average of the per-reference speaker vectors.
pub fn encode_speaker_reference(encoder: &SpeakerEncoder, references: &[&Utterance]) -> Result<Vec<f64>> {
    if references.is_empty() {
        return Err(Error::Input("at least one reference utterance is required".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for r in references {
        let v = encoder.speaker_vector(r)?;
        match acc.as_mut() {
            None => acc = Some(v),
            Some(a) => a.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
        }
    }
    let inv = 1.0 / references.len() as f64;
    Ok(acc.expect("non-empty").into_iter().map(|x| x * inv).collect())
}

/// Regression of the encoder's utterance embedding onto oracle targets
/// (MSE), on held-out synthetic speakers. Returns the per-step losses.
pub fn pretrain_encoder(encoder: &mut SpeakerEncoder, corpus: &Corpus, cfg: &EncoderConfig, seed: u64) -> Result<Vec<f64>> {
    if encoder.net != (Net::Mlp { frozen: false }) {
        return Err(Error::Config("only a trainable network encoder can be pre-trained".into()));
    }
    let held_out_seed = mix_seed(corpus.global_seed ^ seed, 0x9E1D);
    // episodes are never drawn from this corpus, so the 2K floor does not apply
    let held_out_cfg = CorpusConfig { k_shot: 1, ..corpus.config.clone() };
    let held_out = generate_corpus(cfg.pretrain_speakers, cfg.pretrain_utts_per_speaker, held_out_seed, Split::Train, &held_out_cfg)?;
    let targets: Vec<Vec<f64>> = held_out
        .utterances
        .iter()
        .map(|u| oracle_embed(u.into(), &encoder.templates).map(|e| e.0))
        .collect::<Result<_>>()?;
    let net_tensors = encoder.params.len() - 1;
    let mut opt = Optimizer::new(OptimizerKind::adam(), &encoder.params);
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    let batch = cfg.pretrain_batch.min(held_out.utterances.len()).max(1);
    for step in 0..cfg.pretrain_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x9E1E), step as u64));
        let picks = index::sample(&mut rng, held_out.utterances.len(), batch);
        let mut grads = encoder.params.zeros_like();
        let mut loss = 0.0;
        for i in picks {
            let mut tape = Tape::new();
            let q = encoder.leaves(&mut tape);
            let e = encoder.embedding_graph(&mut tape, &q, &held_out.utterances[i])?;
            let l = tape.mse(e, Tensor::row_vector(targets[i].clone()));
            loss += tape.value(l).data[0] / batch as f64;
            let mut g = tape.backward_seeded(l, 1.0 / batch as f64);
            for (acc, &v) in grads.iter_mut().zip(&q[..net_tensors]) {
                if let Some(t) = g.take(v) {
                    acc.accumulate(&t);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite encoder pre-training loss".into()));
        }
        opt.apply(&mut encoder.params, &mut grads, cfg.pretrain_lr, Some(1.0));
        losses.push(loss);
    }
    Ok(losses)
}

/// Joint state of a speaker-encoding TTS run.
#[derive(Clone, Debug)]
pub struct SpkEncState {
    pub tts: TrainState,
    pub encoder: SpeakerEncoder,
    pub encoder_opt: Optimizer,
}

const ENC_OPT_PREFIX: &str = "spk_enc_opt";

impl SpkEncState {
    pub fn init(
        model: &FastSpeech,
        corpus: &Corpus,
        setting: EncoderSetting,
        enc_cfg: &EncoderConfig,
        cfg: &BaselineConfig,
        frozen: Option<&SpeakerEncoder>,
        seed: u64,
    ) -> Result<Self> {
        let tts = TrainState::init(model, corpus, cfg.optimizer, seed)?;
        let mut encoder = SpeakerEncoder::new(setting, corpus, model.config().spk_emb_dim, enc_cfg, frozen, seed)?;
        if setting == EncoderSetting::PretrainedJoint {
            let losses = pretrain_encoder(&mut encoder, corpus, enc_cfg, seed)?;
            log::info!(
                "encoder pre-training: loss {:.4} -> {:.4}",
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        let encoder_opt = Optimizer::new(cfg.optimizer, &encoder.params);
        Ok(Self { tts, encoder, encoder_opt })
    }

    pub fn to_checkpoint(&self, model: &FastSpeech, cfg: &BaselineConfig, seed: u64) -> Checkpoint {
        let mut ck = self.tts.to_checkpoint(model, baseline_info(&self.encoder.setting.approach_tag(), cfg, seed, self.tts.step));
        ck.info.insert("speaker_encoder".into(), self.encoder.info());
        ck.extra.extend(self.encoder.to_extra());
        ck.extra.extend(self.encoder_opt.to_extra(ENC_OPT_PREFIX));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, corpus: &Corpus, kind: OptimizerKind) -> Result<Self> {
        let tts = TrainState::from_checkpoint(ck, kind)?;
        let encoder = SpeakerEncoder::from_checkpoint(ck, corpus)?;
        let encoder_opt = Optimizer::from_extra(kind, &encoder.params, &ck.extra, ENC_OPT_PREFIX)?;
        Ok(Self { tts, encoder, encoder_opt })
    }
}

/// Summed TTS loss over `batch`, each utterance conditioned on the encoder's
/// vector of itself; gradients for the TTS and for the encoder.
pub fn spk_enc_loss_grad(
    model: &FastSpeech,
    tts: &ModelParameters,
    encoder: &SpeakerEncoder,
    batch: &[&Utterance],
) -> Result<(LossBreakdown, Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let mut g_tts = tts.set.zeros_like();
    let mut g_enc = encoder.params.zeros_like();
    let mut loss = LossBreakdown::default();
    for utt in batch {
        model.n_phoneme_check(&utt.phonemes)?;
        let mut tape = Tape::new();
        let p = model.leaves(&mut tape, &tts.set.values);
        let q = encoder.leaves(&mut tape);
        let spk = encoder.vector_graph(&mut tape, &q, utt)?;
        let lv = model.loss_graph(&mut tape, &p, utt, SpeakerNode::Vector(spk));
        loss.accumulate(
            &LossBreakdown {
                mel_loss: tape.value(lv.mel).data[0],
                duration_loss: tape.value(lv.duration).data[0],
                pitch_loss: tape.value(lv.pitch).data[0],
                energy_loss: tape.value(lv.energy).data[0],
                total: tape.value(lv.total).data[0],
            },
            1.0,
        );
        let mut g = tape.backward(lv.total);
        for (acc, &v) in g_tts.iter_mut().zip(&p) {
            if let Some(t) = g.take(v) {
                acc.accumulate(&t);
            }
        }
        for (acc, &v) in g_enc.iter_mut().zip(&q) {
            if let Some(t) = g.take(v) {
                acc.accumulate(&t);
            }
        }
    }
    Ok((loss, g_tts, g_enc))
}

/// One joint step; clipping uses the global norm over both gradient sets.
pub fn spk_enc_step(model: &FastSpeech, state: &mut SpkEncState, batch: &[&Utterance], cfg: &BaselineConfig) -> Result<(LossBreakdown, f64)> {
    let (loss, mut g_tts, mut g_enc) = spk_enc_loss_grad(model, &state.tts.params, &state.encoder, batch)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric("non-finite speaker-encoding loss".into()));
    }
    let norm = (vecops::dot(&g_tts, &g_tts) + vecops::dot(&g_enc, &g_enc)).sqrt();
    if let Some(c) = cfg.clip {
        if norm > c {
            vecops::scale(&mut g_tts, c / norm);
            vecops::scale(&mut g_enc, c / norm);
        }
    }
    state.tts.optimizer.apply(&mut state.tts.params.set, &mut g_tts, cfg.lr, None);
    state.encoder_opt.apply(&mut state.encoder.params, &mut g_enc, cfg.lr, None);
    if !state.tts.params.set.is_finite() || !state.encoder.params.is_finite() {
        return Err(Error::Numeric("non-finite parameters after speaker-encoding step".into()));
    }
    state.tts.step += 1;
    let mut mean = LossBreakdown::default();
    mean.accumulate(&loss, 1.0 / batch.len() as f64);
    Ok((mean, norm))
}

/// Joint TTS + speaker-encoder training from `state` up to `cfg.steps`.
#[allow(clippy::too_many_arguments)]
pub fn train_speaker_encoder_tts(
    model: &FastSpeech,
    corpus: &Corpus,
    cfg: &BaselineConfig,
    seed: u64,
    mut state: SpkEncState,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<SpkEncState> {
    cfg.validate()?;
    model.config().matches_corpus(&corpus.config)?;
    while state.tts.step < cfg.steps {
        let t0 = Instant::now();
        let batch = sample_batch(corpus, cfg.batch_size, seed, state.tts.step)?;
        let (loss, norm) = spk_enc_step(model, &mut state, &batch, cfg)?;
        let step = state.tts.step;
        on_step(&StepRecord::new(step, &loss, norm, t0.elapsed().as_secs_f64() * 1e3));
        if let Some(dir) = &opts.checkpoint_dir {
            if (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)) || step == cfg.steps {
                let tag = format!("spk_enc_{}", state.encoder.setting);
                state.to_checkpoint(model, cfg, seed).save(&checkpoint_path(dir, &tag, step))?;
            }
        }
    }
    Ok(state)
}

/// Approach tag stored in a checkpoint.
pub fn checkpoint_approach(ck: &Checkpoint) -> Result<String> {
    ck.info_str("approach").map(str::to_string).ok_or_else(|| Error::Config("checkpoint has no approach tag".into()))
}

/// Load a speaker-encoding checkpoint from disk.
pub fn load_spk_enc(path: &Path, corpus: &Corpus) -> Result<(Checkpoint, SpeakerEncoder)> {
    let ck = Checkpoint::load(path)?;
    let enc = SpeakerEncoder::from_checkpoint(&ck, corpus)?;
    Ok((ck, enc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_names_round_trip() {
        for s in EncoderSetting::ALL {
            assert_eq!(s.to_string().parse::<EncoderSetting>().unwrap(), s);
        }
        assert!("d-vector".parse::<EncoderSetting>().is_err());
        assert_eq!(EncoderSetting::FixedOracle.approach_tag(), "spk_enc:fixed_oracle");
    }

    #[test]
    fn batch_sampling_is_distinct_and_seeded() {
        let c = generate_corpus(4, 10, 1, Split::Train, &crate::corpus::CorpusConfig::default()).unwrap();
        let a = sample_batch(&c, 20, 3, 7).unwrap();
        let b = sample_batch(&c, 20, 3, 7).unwrap();
        let ids = |v: &[&Utterance]| v.iter().map(|u| u.id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let mut s = ids(&a);
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 20);
        assert!(sample_batch(&c, 41, 3, 7).is_err());
    }
}

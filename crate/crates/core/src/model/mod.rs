//! Toy multi-speaker FastSpeech 2.
//!
//! Phoneme encoder (speaker independent) → variance adaptor (duration,
//! length regulation, pitch, energy) → mel decoder. The speaker vector is
//! broadcast-added at the variance-adaptor input and at the decoder input,
//! each through its own learned projection.

pub mod checkpoint;
pub mod params;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, Utterance};
use crate::error::{Error, Result};
use crate::scalar::{Dual, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use params::{ParamMeta, ParamSet, Partition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbMode {
    /// One embedding row per known speaker.
    Table,
    /// A single embedding shared by every speaker.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub predictor_dim: usize,
    pub n_phonemes: usize,
    pub n_mel: usize,
    pub spk_emb_dim: usize,
    pub emb_mode: EmbMode,
    pub n_bins: usize,
    pub pitch_range: [f64; 2],
    pub energy_range: [f64; 2],
    /// Fixed affine de-normalization of predictor outputs: `center + scale·raw`.
    pub pitch_norm: [f64; 2],
    pub energy_norm: [f64; 2],
    pub log_duration_center: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            n_heads: 2,
            ffn_dim: 64,
            predictor_dim: 32,
            n_phonemes: 16,
            n_mel: 8,
            spk_emb_dim: 32,
            emb_mode: EmbMode::Table,
            n_bins: 16,
            pitch_range: [54.0, 80.0],
            energy_range: [0.3, 2.5],
            pitch_norm: [66.0, 4.0],
            energy_norm: [1.25, 0.5],
            log_duration_center: 1.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!("hidden_dim {} must be a positive multiple of n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.ffn_dim == 0 || self.predictor_dim == 0 || self.spk_emb_dim == 0 {
            return bad("ffn_dim, predictor_dim and spk_emb_dim must be positive".into());
        }
        if self.n_phonemes == 0 || self.n_mel == 0 || self.n_bins == 0 {
            return bad("n_phonemes, n_mel and n_bins must be positive".into());
        }
        if !(self.pitch_range[0] < self.pitch_range[1] && self.energy_range[0] < self.energy_range[1]) {
            return bad("pitch/energy bin ranges must be increasing".into());
        }
        Ok(())
    }

    pub fn matches_corpus(&self, c: &CorpusConfig) -> Result<()> {
        if self.n_phonemes != c.n_phonemes || self.n_mel != c.n_mel {
            return Err(Error::Config(format!(
                "model expects P={} C_mel={}, corpus has P={} C_mel={}",
                self.n_phonemes, self.n_mel, c.n_phonemes, c.n_mel
            )));
        }
        Ok(())
    }

    pub fn pitch_bin(&self, v: f64) -> usize {
        bucketize(v, self.pitch_range, self.n_bins)
    }

    pub fn energy_bin(&self, v: f64) -> usize {
        bucketize(v, self.energy_range, self.n_bins)
    }
}

fn bucketize(v: f64, [lo, hi]: [f64; 2], n: usize) -> usize {
    let x = ((v - lo) / (hi - lo) * n as f64).floor();
    if x.is_nan() || x < 0.0 {
        0
    } else {
        (x as usize).min(n - 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Predictor {
    l1: Linear,
    ln: Norm,
    l2: Linear,
}

/// Index of every tensor in the parameter list, derived from the config.
#[derive(Clone, Debug)]
struct Layout {
    phoneme_emb: usize,
    enc_blocks: Vec<Block>,
    enc_ln: Norm,
    spk_proj_va: usize,
    duration: Predictor,
    pitch: Predictor,
    energy: Predictor,
    pitch_emb: usize,
    energy_emb: usize,
    spk_proj_dec: usize,
    dec_blocks: Vec<Block>,
    dec_ln: Norm,
    mel_out: Linear,
    spk_store: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Embedding,
    Zeros,
    Ones,
}

struct LayoutBuilder {
    meta: Vec<ParamMeta>,
    init: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, p: Partition, rows: usize, cols: usize, init: Init) -> usize {
        self.meta.push(ParamMeta { name, partition: p, rows, cols });
        self.init.push(init);
        self.meta.len() - 1
    }

    fn linear(&mut self, name: &str, p: Partition, i: usize, o: usize, bias: bool) -> Linear {
        let w = self.add(format!("{name}.w"), p, i, o, Init::Xavier);
        let b = bias.then(|| self.add(format!("{name}.b"), p, 1, o, Init::Zeros));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, p: Partition, d: usize) -> Norm {
        let g = self.add(format!("{name}.g"), p, 1, d, Init::Ones);
        let b = self.add(format!("{name}.b"), p, 1, d, Init::Zeros);
        Norm { g, b }
    }

    fn block(&mut self, name: &str, p: Partition, cfg: &ModelConfig) -> Block {
        let h = cfg.hidden_dim;
        Block {
            ln1: self.norm(&format!("{name}.ln1"), p, h),
            wq: self.add(format!("{name}.attn.wq"), p, h, h, Init::Xavier),
            wk: self.add(format!("{name}.attn.wk"), p, h, h, Init::Xavier),
            wv: self.add(format!("{name}.attn.wv"), p, h, h, Init::Xavier),
            wo: self.add(format!("{name}.attn.wo"), p, h, h, Init::Xavier),
            ln2: self.norm(&format!("{name}.ln2"), p, h),
            ff1: self.linear(&format!("{name}.ff1"), p, h, cfg.ffn_dim, true),
            ff2: self.linear(&format!("{name}.ff2"), p, cfg.ffn_dim, h, true),
        }
    }

    fn predictor(&mut self, name: &str, cfg: &ModelConfig) -> Predictor {
        let p = Partition::VarianceAdaptor;
        Predictor {
            l1: self.linear(&format!("{name}.l1"), p, cfg.hidden_dim, cfg.predictor_dim, true),
            ln: self.norm(&format!("{name}.ln"), p, cfg.predictor_dim),
            l2: self.linear(&format!("{name}.l2"), p, cfg.predictor_dim, 1, true),
        }
    }
}

fn build_layout(cfg: &ModelConfig, store_rows: usize) -> (Layout, Vec<ParamMeta>, Vec<Init>) {
    use Partition::*;
    let h = cfg.hidden_dim;
    let mut b = LayoutBuilder { meta: Vec::new(), init: Vec::new() };
    let phoneme_emb = b.add("encoder.phoneme_emb".into(), Encoder, cfg.n_phonemes, h, Init::Embedding);
    let enc_blocks = (0..cfg.n_encoder_blocks).map(|i| b.block(&format!("encoder.block{i}"), Encoder, cfg)).collect();
    let enc_ln = b.norm("encoder.ln_out", Encoder, h);
    let spk_proj_va = b.add("va.spk_proj".into(), VarianceAdaptor, cfg.spk_emb_dim, h, Init::Xavier);
    let duration = b.predictor("va.duration", cfg);
    let pitch = b.predictor("va.pitch", cfg);
    let energy = b.predictor("va.energy", cfg);
    let pitch_emb = b.add("va.pitch_emb".into(), VarianceAdaptor, cfg.n_bins, h, Init::Embedding);
    let energy_emb = b.add("va.energy_emb".into(), VarianceAdaptor, cfg.n_bins, h, Init::Embedding);
    let spk_proj_dec = b.add("decoder.spk_proj".into(), Decoder, cfg.spk_emb_dim, h, Init::Xavier);
    let dec_blocks = (0..cfg.n_decoder_blocks).map(|i| b.block(&format!("decoder.block{i}"), Decoder, cfg)).collect();
    let dec_ln = b.norm("decoder.ln_out", Decoder, h);
    let mel_out = b.linear("decoder.mel_out", Decoder, h, cfg.n_mel, true);
    let spk_store = b.add("speaker_store".into(), SpeakerStore, store_rows, cfg.spk_emb_dim, Init::Zeros);
    let layout = Layout {
        phoneme_emb,
        enc_blocks,
        enc_ln,
        spk_proj_va,
        duration,
        pitch,
        energy,
        pitch_emb,
        energy_emb,
        spk_proj_dec,
        dec_blocks,
        dec_ln,
        mel_out,
        spk_store,
    };
    (layout, b.meta, b.init)
}

/// Full parameter state of one acoustic model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub set: ParamSet,
    pub emb_mode: EmbMode,
    /// Speaker id → row of the store (table mode only).
    pub speaker_rows: BTreeMap<u32, usize>,
}

impl ModelParameters {
    pub fn spk_store_index(&self) -> usize {
        self.set.len() - 1
    }

    pub fn spk_store(&self) -> &Tensor<f64> {
        &self.set.values[self.spk_store_index()]
    }

    pub fn speaker_row(&self, id: u32) -> Result<usize> {
        match self.emb_mode {
            EmbMode::Shared => Ok(0),
            EmbMode::Table => self.speaker_rows.get(&id).copied().ok_or(Error::UnknownSpeaker(id)),
        }
    }

    pub fn speaker_vector(&self, id: u32) -> Result<Vec<f64>> {
        Ok(self.spk_store().row(self.speaker_row(id)?).to_vec())
    }
}

#[derive(Clone, Debug)]
pub enum SpeakerRef {
    Id(u32),
    /// Utterance-level vector from a speaker encoder; bypasses the store.
    Vector(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct ModelInput<'a> {
    pub phonemes: &'a [usize],
    pub speaker: SpeakerRef,
}

/// Ground-truth variance targets for teacher forcing.
#[derive(Clone, Copy, Debug)]
pub struct VarianceTargets<'a> {
    pub durations: &'a [usize],
    pub pitch: &'a [f64],
    pub energy: &'a [f64],
}

impl<'a> From<&'a Utterance> for VarianceTargets<'a> {
    fn from(u: &'a Utterance) -> Self {
        VarianceTargets { durations: &u.durations, pitch: &u.pitch, energy: &u.energy }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceOutput {
    pub regulated: Tensor<f64>,
    pub log_duration_pred: Vec<f64>,
    pub pitch_pred: Vec<f64>,
    pub energy_pred: Vec<f64>,
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[frames × n_mel]`
    pub mel_pred: Tensor<f64>,
    pub log_duration_pred: Vec<f64>,
    pub pitch_pred: Vec<f64>,
    pub energy_pred: Vec<f64>,
    /// Durations that drove the length regulator.
    pub durations: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_loss: f64,
    pub duration_loss: f64,
    pub pitch_loss: f64,
    pub energy_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &LossBreakdown, w: f64) {
        self.mel_loss += w * o.mel_loss;
        self.duration_loss += w * o.duration_loss;
        self.pitch_loss += w * o.pitch_loss;
        self.energy_loss += w * o.energy_loss;
        self.total += w * o.total;
    }
}

/// Tape variables of one forward pass.
pub struct ForwardVars {
    pub mel: Var,
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub durations: Vec<usize>,
}

pub struct LossVars {
    pub mel: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub total: Var,
}

/// Where a graph takes its speaker vector from.
#[derive(Clone, Copy, Debug)]
pub enum SpeakerNode {
    StoreRow(usize),
    /// A `1×spk_emb_dim` tape variable.
    Vector(Var),
}

#[derive(Clone, Debug)]
pub struct FastSpeech {
    cfg: ModelConfig,
    layout: Layout,
}

pub fn length_regulate(hidden: &Tensor<f64>, durations: &[usize]) -> Result<Tensor<f64>> {
    if durations.len() != hidden.rows {
        return Err(Error::Input(format!("{} durations for {} hidden rows", durations.len(), hidden.rows)));
    }
    if durations.contains(&0) {
        return Err(Error::Input("durations must be >= 1".into()));
    }
    let idx = frame_index(durations);
    let mut out = Tensor::zeros(idx.len(), hidden.cols);
    for (i, &src) in idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(hidden.row(src));
    }
    Ok(out)
}

fn frame_index(durations: &[usize]) -> Vec<usize> {
    durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect()
}

pub fn free_run_duration(log_d: f64) -> usize {
    let d = log_d.exp().round();
    if d.is_finite() && d >= 1.0 {
        d.min(1e6) as usize
    } else {
        1
    }
}

fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            t.data[pos * dim + i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl FastSpeech {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, _, _) = build_layout(&cfg, 1);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Expected tensor manifest for a store with `store_rows` rows.
    pub fn manifest(&self, store_rows: usize) -> Vec<ParamMeta> {
        build_layout(&self.cfg, store_rows).1
    }

    pub fn init_params(&self, speaker_ids: &[u32], seed: u64) -> Result<ModelParameters> {
        let rows = match self.cfg.emb_mode {
            EmbMode::Table => {
                if speaker_ids.is_empty() {
                    return Err(Error::Config("table mode needs at least one speaker id".into()));
                }
                speaker_ids.iter().collect::<BTreeSet<_>>().len()
            }
            EmbMode::Shared => 1,
        };
        let (_, meta, inits) = build_layout(&self.cfg, rows);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = meta
            .iter()
            .zip(&inits)
            .map(|(m, init)| {
                let n = m.rows * m.cols;
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier => {
                        let a = (6.0 / (m.rows + m.cols) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::Embedding => {
                        let a = (3.0 / m.cols as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                };
                Tensor::from_vec(m.rows, m.cols, data)
            })
            .collect();
        let speaker_rows = match self.cfg.emb_mode {
            EmbMode::Table => {
                let ids: BTreeSet<u32> = speaker_ids.iter().copied().collect();
                ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
            }
            EmbMode::Shared => BTreeMap::new(),
        };
        Ok(ModelParameters { set: ParamSet::new(meta, values), emb_mode: self.cfg.emb_mode, speaker_rows })
    }

    /// Validate a parameter set against this model's layout.
    pub fn check_params(&self, params: &ModelParameters) -> Result<()> {
        let rows = params.spk_store().rows;
        let expected = self.manifest(rows);
        if expected.as_slice() != params.set.meta() {
            return Err(Error::Config("parameter manifest does not match model config".into()));
        }
        if params.emb_mode == EmbMode::Shared && rows != 1 {
            return Err(Error::Config("shared mode keeps exactly one embedding".into()));
        }
        Ok(())
    }

    pub fn n_phoneme_check(&self, phonemes: &[usize]) -> Result<()> {
        if phonemes.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(p) = phonemes.iter().find(|&&p| p >= self.cfg.n_phonemes) {
            return Err(Error::Input(format!("phoneme id {p} out of range {}", self.cfg.n_phonemes)));
        }
        Ok(())
    }

    /// Push every parameter tensor onto the tape as a trainable leaf.
    pub fn leaves<T: Scalar>(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Vec<Var> {
        values.iter().map(|t| tape.leaf(t.clone(), true)).collect()
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], l: Linear, x: Var) -> Var {
        let y = tape.matmul(x, p[l.w]);
        match l.b {
            Some(b) => tape.add_row(y, p[b]),
            None => y,
        }
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Var {
        let y = tape.layer_norm(x);
        let y = tape.mul_row(y, p[n.g]);
        tape.add_row(y, p[n.b])
    }

    fn block<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], b: &Block, x: Var) -> Var {
        let h = self.cfg.hidden_dim;
        let dh = h / self.cfg.n_heads;
        let xn = self.norm(tape, p, b.ln1, x);
        let q = tape.matmul(xn, p[b.wq]);
        let k = tape.matmul(xn, p[b.wk]);
        let v = tape.matmul(xn, p[b.wv]);
        let inv = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.cfg.n_heads)
            .map(|i| {
                let (qh, kh, vh) =
                    (tape.slice_cols(q, i * dh, dh), tape.slice_cols(k, i * dh, dh), tape.slice_cols(v, i * dh, dh));
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, inv);
                let a = tape.softmax_rows(s);
                tape.matmul(a, vh)
            })
            .collect();
        let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let att = tape.matmul(att, p[b.wo]);
        let x = tape.add(x, att);
        let xn = self.norm(tape, p, b.ln2, x);
        let f = self.linear(tape, p, b.ff1, xn);
        let f = tape.silu(f);
        let f = self.linear(tape, p, b.ff2, f);
        tape.add(x, f)
    }

    fn predictor<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], pr: &Predictor, x: Var) -> Var {
        let y = self.linear(tape, p, pr.l1, x);
        let y = tape.silu(y);
        let y = self.norm(tape, p, pr.ln, y);
        self.linear(tape, p, pr.l2, y)
    }

    pub fn encode_graph<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], phonemes: &[usize]) -> Var {
        let x = tape.gather_rows(p[self.layout.phoneme_emb], phonemes.to_vec());
        let pe = tape.constant(positional_encoding(phonemes.len(), self.cfg.hidden_dim));
        let mut x = tape.add(x, pe);
        for b in &self.layout.enc_blocks {
            x = self.block(tape, p, b, x);
        }
        self.norm(tape, p, self.layout.enc_ln, x)
    }

    fn speaker_vec<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], spk: SpeakerNode) -> Var {
        match spk {
            SpeakerNode::StoreRow(r) => tape.gather_rows(p[self.layout.spk_store], vec![r]),
            SpeakerNode::Vector(v) => v,
        }
    }

    /// Returns (regulated frames, log durations, pitch, energy, durations used).
    pub fn variance_graph<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        hidden: Var,
        spk: Var,
        targets: Option<VarianceTargets<'_>>,
    ) -> (Var, Var, Var, Var, Vec<usize>) {
        let l = &self.layout;
        let s = tape.matmul(spk, p[l.spk_proj_va]);
        let x = tape.add_row(hidden, s);
        let raw_d = self.predictor(tape, p, &l.duration, x);
        let log_d = tape.affine(raw_d, 1.0, self.cfg.log_duration_center);
        let durations: Vec<usize> = match targets {
            Some(t) => t.durations.to_vec(),
            None => tape.value(log_d).data.iter().map(|v| free_run_duration(v.re())).collect(),
        };
        let frames = tape.gather_rows(x, frame_index(&durations));

        let [pc, ps] = self.cfg.pitch_norm;
        let raw_p = self.predictor(tape, p, &l.pitch, frames);
        let raw_p = tape.segment_mean(raw_p, durations.clone());
        let pitch = tape.affine(raw_p, ps, pc);
        let pitch_src: Vec<f64> = match targets {
            Some(t) => t.pitch.to_vec(),
            None => tape.value(pitch).data.iter().map(|v| v.re()).collect(),
        };
        let bins = self.expand_bins(&durations, pitch_src.iter().map(|&v| self.cfg.pitch_bin(v)));
        let pe = tape.gather_rows(p[l.pitch_emb], bins);
        let frames = tape.add(frames, pe);

        let [ec, es] = self.cfg.energy_norm;
        let raw_e = self.predictor(tape, p, &l.energy, frames);
        let raw_e = tape.segment_mean(raw_e, durations.clone());
        let energy = tape.affine(raw_e, es, ec);
        let energy_src: Vec<f64> = match targets {
            Some(t) => t.energy.to_vec(),
            None => tape.value(energy).data.iter().map(|v| v.re()).collect(),
        };
        let bins = self.expand_bins(&durations, energy_src.iter().map(|&v| self.cfg.energy_bin(v)));
        let ee = tape.gather_rows(p[l.energy_emb], bins);
        let frames = tape.add(frames, ee);
        (frames, log_d, pitch, energy, durations)
    }

    fn expand_bins(&self, durations: &[usize], bins: impl Iterator<Item = usize>) -> Vec<usize> {
        bins.zip(durations).flat_map(|(b, &d)| std::iter::repeat_n(b, d)).collect()
    }

    pub fn decode_graph<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], frames: Var, spk: Var) -> Var {
        let l = &self.layout;
        let s = tape.matmul(spk, p[l.spk_proj_dec]);
        let x = tape.add_row(frames, s);
        let n = tape.value(x).rows;
        let pe = tape.constant(positional_encoding(n, self.cfg.hidden_dim));
        let mut x = tape.add(x, pe);
        for b in &l.dec_blocks {
            x = self.block(tape, p, b, x);
        }
        let x = self.norm(tape, p, l.dec_ln, x);
        self.linear(tape, p, l.mel_out, x)
    }

    /// encode → variance adaptor → decode on the tape.
    pub fn forward_graph<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        phonemes: &[usize],
        spk: SpeakerNode,
        targets: Option<VarianceTargets<'_>>,
    ) -> ForwardVars {
        let hidden = self.encode_graph(tape, p, phonemes);
        let s = self.speaker_vec(tape, p, spk);
        let (frames, log_duration, pitch, energy, durations) = self.variance_graph(tape, p, hidden, s, targets);
        let mel = self.decode_graph(tape, p, frames, s);
        ForwardVars { mel, log_duration, pitch, energy, durations }
    }

    /// Teacher-forced supervised loss of one utterance.
    pub fn loss_graph<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], utt: &Utterance, spk: SpeakerNode) -> LossVars {
        let fv = self.forward_graph(tape, p, &utt.phonemes, spk, Some(utt.into()));
        let n = utt.phonemes.len();
        let lift = |v: &[f64]| Tensor::from_vec(v.len(), 1, v.iter().map(|&x| T::from_f64(x)).collect());
        let mel_t = Tensor::from_vec(utt.n_frames(), utt.n_mel, utt.mel.iter().map(|&x| T::from_f64(x)).collect());
        let mel = tape.mae(fv.mel, mel_t);
        let log_targets: Vec<f64> = utt.durations.iter().map(|&d| (d as f64).ln()).collect();
        let duration = tape.mse(fv.log_duration, lift(&log_targets));
        let pitch = tape.mse(fv.pitch, lift(&utt.pitch[..n]));
        let energy = tape.mse(fv.energy, lift(&utt.energy[..n]));
        let a = tape.add(mel, duration);
        let b = tape.add(pitch, energy);
        let total = tape.add(a, b);
        LossVars { mel, duration, pitch, energy, total }
    }

    fn resolve_speaker<T: Scalar>(&self, tape: &mut Tape<T>, params: &ModelParameters, spk: &SpeakerRef) -> Result<SpeakerNode> {
        Ok(match spk {
            SpeakerRef::Id(id) => SpeakerNode::StoreRow(params.speaker_row(*id)?),
            SpeakerRef::Vector(v) => {
                if v.len() != self.cfg.spk_emb_dim {
                    return Err(Error::Input(format!("speaker vector has {} dims, expected {}", v.len(), self.cfg.spk_emb_dim)));
                }
                SpeakerNode::Vector(tape.constant(Tensor::row_vector(v.iter().map(|&x| T::from_f64(x)).collect())))
            }
        })
    }

    fn const_leaves(&self, tape: &mut Tape<f64>, params: &ModelParameters) -> Vec<Var> {
        params.set.values.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn encode(&self, params: &ModelParameters, phonemes: &[usize]) -> Result<Tensor<f64>> {
        self.n_phoneme_check(phonemes)?;
        let mut tape = Tape::new();
        let p = self.const_leaves(&mut tape, params);
        let h = self.encode_graph(&mut tape, &p, phonemes);
        Ok(tape.value(h).clone())
    }

    pub fn variance_adapt(
        &self,
        params: &ModelParameters,
        hidden: &Tensor<f64>,
        spk_vec: &[f64],
        targets: Option<VarianceTargets<'_>>,
    ) -> Result<VarianceOutput> {
        if spk_vec.len() != self.cfg.spk_emb_dim {
            return Err(Error::Input(format!("speaker vector has {} dims, expected {}", spk_vec.len(), self.cfg.spk_emb_dim)));
        }
        if hidden.cols != self.cfg.hidden_dim {
            return Err(Error::Input(format!("hidden has {} columns, expected {}", hidden.cols, self.cfg.hidden_dim)));
        }
        if let Some(t) = targets {
            check_targets(t, hidden.rows)?;
        }
        let mut tape = Tape::new();
        let p = self.const_leaves(&mut tape, params);
        let h = tape.constant(hidden.clone());
        let s = tape.constant(Tensor::row_vector(spk_vec.to_vec()));
        let (frames, log_d, pitch, energy, durations) = self.variance_graph(&mut tape, &p, h, s, targets);
        Ok(VarianceOutput {
            regulated: tape.value(frames).clone(),
            log_duration_pred: tape.value(log_d).data.clone(),
            pitch_pred: tape.value(pitch).data.clone(),
            energy_pred: tape.value(energy).data.clone(),
            durations,
        })
    }

    pub fn decode(&self, params: &ModelParameters, regulated: &Tensor<f64>, spk_vec: &[f64]) -> Result<Tensor<f64>> {
        if spk_vec.len() != self.cfg.spk_emb_dim || regulated.cols != self.cfg.hidden_dim {
            return Err(Error::Input("decoder input dimensions do not match the model".into()));
        }
        let mut tape = Tape::new();
        let p = self.const_leaves(&mut tape, params);
        let x = tape.constant(regulated.clone());
        let s = tape.constant(Tensor::row_vector(spk_vec.to_vec()));
        let m = self.decode_graph(&mut tape, &p, x, s);
        Ok(tape.value(m).clone())
    }

    pub fn forward(
        &self,
        params: &ModelParameters,
        input: &ModelInput<'_>,
        targets: Option<VarianceTargets<'_>>,
    ) -> Result<ForwardOutput> {
        self.n_phoneme_check(input.phonemes)?;
        if let Some(t) = targets {
            check_targets(t, input.phonemes.len())?;
        }
        let mut tape = Tape::new();
        let spk = self.resolve_speaker(&mut tape, params, &input.speaker)?;
        let p = self.const_leaves(&mut tape, params);
        let fv = self.forward_graph(&mut tape, &p, input.phonemes, spk, targets);
        Ok(ForwardOutput {
            mel_pred: tape.value(fv.mel).clone(),
            log_duration_pred: tape.value(fv.log_duration).data.clone(),
            pitch_pred: tape.value(fv.pitch).data.clone(),
            energy_pred: tape.value(fv.energy).data.clone(),
            durations: fv.durations,
        })
    }

    /// Loss and gradient for a batch, at any scalar type. The loss is the
    /// mean of per-utterance totals (or the sum when `sum` is set).
    pub fn batch_loss_grad<T: Scalar>(
        &self,
        values: &[Tensor<T>],
        speaker_row: &dyn Fn(u32) -> Result<usize>,
        batch: &[&Utterance],
        sum: bool,
    ) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let w = if sum { 1.0 } else { 1.0 / batch.len() as f64 };
        let mut grads: Vec<Tensor<T>> = values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        let mut loss = LossBreakdown::default();
        for utt in batch {
            self.n_phoneme_check(&utt.phonemes)?;
            let row = speaker_row(utt.speaker_id)?;
            let mut tape = Tape::new();
            let p = self.leaves(&mut tape, values);
            let lv = self.loss_graph(&mut tape, &p, utt, SpeakerNode::StoreRow(row));
            let parts = LossBreakdown {
                mel_loss: tape.value(lv.mel).data[0].re(),
                duration_loss: tape.value(lv.duration).data[0].re(),
                pitch_loss: tape.value(lv.pitch).data[0].re(),
                energy_loss: tape.value(lv.energy).data[0].re(),
                total: tape.value(lv.total).data[0].re(),
            };
            loss.accumulate(&parts, w);
            let mut g = tape.backward_seeded(lv.total, T::from_f64(w));
            for (acc, &v) in grads.iter_mut().zip(&p) {
                if let Some(t) = g.take(v) {
                    acc.accumulate(&t);
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn loss_grad(
        &self,
        params: &ModelParameters,
        batch: &[&Utterance],
        sum: bool,
    ) -> Result<(LossBreakdown, Vec<Tensor<f64>>)> {
        self.batch_loss_grad(&params.set.values, &|id| params.speaker_row(id), batch, sum)
    }

    /// Hessian-vector product of the batch loss at `params` along `dir`.
    pub fn hvp(
        &self,
        params: &ModelParameters,
        batch: &[&Utterance],
        dir: &[Tensor<f64>],
        sum: bool,
    ) -> Result<Vec<Tensor<f64>>> {
        let duals: Vec<Tensor<Dual>> = params
            .set
            .values
            .iter()
            .zip(dir)
            .map(|(t, d)| Tensor::from_vec(t.rows, t.cols, t.data.iter().zip(&d.data).map(|(&x, &e)| Dual::new(x, e)).collect()))
            .collect();
        let (_, g) = self.batch_loss_grad(&duals, &|id| params.speaker_row(id), batch, sum)?;
        Ok(g.into_iter().map(|t| Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|d| d.eps).collect())).collect())
    }

    pub fn batch_loss(&self, params: &ModelParameters, batch: &[&Utterance]) -> Result<LossBreakdown> {
        let mut loss = LossBreakdown::default();
        let w = 1.0 / batch.len().max(1) as f64;
        for utt in batch {
            let out = self.forward(params, &ModelInput { phonemes: &utt.phonemes, speaker: SpeakerRef::Id(utt.speaker_id) }, Some((*utt).into()))?;
            loss.accumulate(&compute_loss(&out, utt)?, w);
        }
        Ok(loss)
    }
}

fn check_targets(t: VarianceTargets<'_>, n: usize) -> Result<()> {
    if t.durations.len() != n || t.pitch.len() != n || t.energy.len() != n {
        return Err(Error::Input(format!("targets must have one value per phoneme ({n})")));
    }
    if t.durations.contains(&0) {
        return Err(Error::Input("target durations must be >= 1".into()));
    }
    Ok(())
}

/// Supervised loss terms on a teacher-forced output.
pub fn compute_loss(out: &ForwardOutput, y: &Utterance) -> Result<LossBreakdown> {
    let n = y.phonemes.len();
    if out.mel_pred.rows != y.n_frames() || out.mel_pred.cols != y.n_mel {
        return Err(Error::Input(format!(
            "mel shape {:?} does not match target {}x{}",
            out.mel_pred.shape(),
            y.n_frames(),
            y.n_mel
        )));
    }
    if out.log_duration_pred.len() != n || out.pitch_pred.len() != n || out.energy_pred.len() != n {
        return Err(Error::Input("per-phoneme predictions do not match target length".into()));
    }
    let mel_loss = out.mel_pred.data.iter().zip(&y.mel).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.mel.len() as f64;
    let mse = |a: &[f64], b: &mut dyn Iterator<Item = f64>| a.iter().zip(b).map(|(x, t)| (x - t).powi(2)).sum::<f64>() / n as f64;
    let duration_loss = mse(&out.log_duration_pred, &mut y.durations.iter().map(|&d| (d as f64).ln()));
    let pitch_loss = mse(&out.pitch_pred, &mut y.pitch.iter().copied());
    let energy_loss = mse(&out.energy_pred, &mut y.energy.iter().copied());
    Ok(LossBreakdown {
        mel_loss,
        duration_loss,
        pitch_loss,
        energy_loss,
        total: mel_loss + duration_loss + pitch_loss + energy_loss,
    })
}

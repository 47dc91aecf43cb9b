//! Module-selective MAML.
//!
//! The inner loop runs full-batch gradient descent on a task's support set,
//! touching only the partitions enabled by a [`ModuleMask`]; the encoder is
//! never adapted. The outer loop differentiates the query loss of the
//! adapted parameters with respect to the initialization and updates every
//! partition. In second-order mode the backward pass through each inner step
//! uses an exact Hessian-vector product of the support loss, including the
//! Jacobian of the inner gradient clip.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::episodes::{EpisodeSampler, TaskEpisode};
use crate::error::{Error, Result};
use crate::io::mix_seed;
use crate::model::checkpoint::Checkpoint;
use crate::model::params::vecops;
use crate::model::{EmbMode, FastSpeech, LossBreakdown, ModelParameters, ParamSet, Partition};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Dual;
use crate::tensor::Tensor;

/// Which partitions the inner loop (and test-time fine-tuning) may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModuleMask {
    pub adapt_va: bool,
    pub adapt_dec: bool,
    pub adapt_emb: bool,
}

impl ModuleMask {
    pub const NONE: ModuleMask = ModuleMask { adapt_va: false, adapt_dec: false, adapt_emb: false };
    pub const EMB: ModuleMask = ModuleMask { adapt_va: false, adapt_dec: false, adapt_emb: true };
    pub const EMB_VA: ModuleMask = ModuleMask { adapt_va: true, adapt_dec: false, adapt_emb: true };
    pub const EMB_DEC: ModuleMask = ModuleMask { adapt_va: false, adapt_dec: true, adapt_emb: true };
    pub const ALL: ModuleMask = ModuleMask { adapt_va: true, adapt_dec: true, adapt_emb: true };

    pub fn new(adapt_va: bool, adapt_dec: bool, adapt_emb: bool) -> Result<Self> {
        let m = Self { adapt_va, adapt_dec, adapt_emb };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.adapt_va || self.adapt_dec) && !self.adapt_emb {
            return Err(Error::Config(format!("mask {self} adapts modules without the speaker embedding")));
        }
        Ok(())
    }

    pub fn adapts(&self, p: Partition) -> bool {
        match p {
            Partition::Encoder => false,
            Partition::VarianceAdaptor => self.adapt_va,
            Partition::Decoder => self.adapt_dec,
            Partition::SpeakerStore => self.adapt_emb,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.adapt_va || self.adapt_dec || self.adapt_emb)
    }

    /// Per-tensor flags for a parameter set.
    pub fn tensor_flags(&self, set: &ParamSet) -> Vec<bool> {
        set.meta().iter().map(|m| self.adapts(m.partition)).collect()
    }
}

impl fmt::Display for ModuleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.adapt_emb {
            parts.push("emb");
        }
        if self.adapt_va {
            parts.push("va");
        }
        if self.adapt_dec {
            parts.push("dec");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl TryFrom<String> for ModuleMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModuleMask> for String {
    fn from(m: ModuleMask) -> String {
        m.to_string()
    }
}

impl FromStr for ModuleMask {
    type Err = Error;

    /// `emb`, `emb+va`, `emb+dec`, `emb+va+dec` (any order), or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = ModuleMask::NONE;
        if s.trim() == "none" {
            return Ok(m);
        }
        for tok in s.split('+').map(str::trim) {
            let flag = match tok {
                "emb" => &mut m.adapt_emb,
                "va" => &mut m.adapt_va,
                "dec" => &mut m.adapt_dec,
                "enc" | "encoder" => return Err(Error::Config("the encoder is never adapted".into())),
                other => return Err(Error::Config(format!("unknown mask module {other:?} in {s:?}"))),
            };
            if *flag {
                return Err(Error::Config(format!("module {tok} repeated in mask {s:?}")));
            }
            *flag = true;
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub tasks_per_step: usize,
    pub k_shot: usize,
    /// Query items per training task; `None` means `k_shot`.
    pub query_size: Option<usize>,
    pub order: Order,
    pub total_meta_steps: usize,
    pub inner_clip: Option<f64>,
    pub outer_clip: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-3,
            inner_steps: 5,
            tasks_per_step: 8,
            k_shot: 5,
            query_size: None,
            order: Order::Second,
            total_meta_steps: 2000,
            inner_clip: Some(1.0),
            outer_clip: Some(1.0),
            optimizer: OptimizerKind::Sgd,
            checkpoint_every: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("alpha ({}) and beta ({}) must be positive", self.alpha, self.beta));
        }
        if self.inner_steps == 0 || self.tasks_per_step == 0 || self.k_shot == 0 {
            return bad("inner_steps, tasks_per_step and k_shot must be at least 1".into());
        }
        if self.query_size == Some(0) {
            return bad("query_size must be at least 1".into());
        }
        for c in [self.inner_clip, self.outer_clip].into_iter().flatten() {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        self.optimizer.validate()
    }

    pub fn query(&self) -> usize {
        self.query_size.unwrap_or(self.k_shot)
    }

    /// Utterances consumed per meta-step, `M·(K+Q)`.
    pub fn samples_per_step(&self) -> usize {
        self.tasks_per_step * (self.k_shot + self.query())
    }
}

/// A differentiable objective over a [`ParamSet`]'s values.
pub trait Learner: Sync {
    type Item: Sync;

    /// Mean loss over `batch` and its gradient for every tensor.
    fn loss_grad(&self, values: &[Tensor<f64>], batch: &[&Self::Item]) -> Result<(LossBreakdown, Vec<Tensor<f64>>)>;

    /// Hessian of the mean batch loss applied to `dir`.
    fn hvp(&self, values: &[Tensor<f64>], batch: &[&Self::Item], dir: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

/// The acoustic model as a learner over utterances.
pub struct TtsLearner<'a> {
    pub model: &'a FastSpeech,
    emb_mode: EmbMode,
    rows: BTreeMap<u32, usize>,
}

impl<'a> TtsLearner<'a> {
    pub fn new(model: &'a FastSpeech, params: &ModelParameters) -> Self {
        Self { model, emb_mode: params.emb_mode, rows: params.speaker_rows.clone() }
    }

    fn row(&self, id: u32) -> Result<usize> {
        match self.emb_mode {
            EmbMode::Shared => Ok(0),
            EmbMode::Table => self.rows.get(&id).copied().ok_or(Error::UnknownSpeaker(id)),
        }
    }
}

impl Learner for TtsLearner<'_> {
    type Item = Utterance;

    fn loss_grad(&self, values: &[Tensor<f64>], batch: &[&Utterance]) -> Result<(LossBreakdown, Vec<Tensor<f64>>)> {
        self.model.batch_loss_grad(values, &|id| self.row(id), batch, false)
    }

    fn hvp(&self, values: &[Tensor<f64>], batch: &[&Utterance], dir: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let duals: Vec<Tensor<Dual>> = values
            .iter()
            .zip(dir)
            .map(|(t, d)| Tensor::from_vec(t.rows, t.cols, t.data.iter().zip(&d.data).map(|(&x, &e)| Dual::new(x, e)).collect()))
            .collect();
        let (_, g) = self.model.batch_loss_grad(&duals, &|id| self.row(id), batch, false)?;
        Ok(g.into_iter().map(|t| Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|d| d.eps).collect())).collect())
    }
}

/// Per-task squared loss `(w − a)²` on a single scalar, averaged over the
/// batch of targets `a`.
pub struct QuadraticSurrogate;

impl QuadraticSurrogate {
    /// A one-scalar parameter set tagged as the speaker store, so any
    /// non-empty mask adapts it.
    pub fn params(w: f64) -> ParamSet {
        ParamSet::new(
            vec![crate::model::ParamMeta { name: "w".into(), partition: Partition::SpeakerStore, rows: 1, cols: 1 }],
            vec![Tensor::row_vector(vec![w])],
        )
    }
}

impl Learner for QuadraticSurrogate {
    type Item = f64;

    fn loss_grad(&self, values: &[Tensor<f64>], batch: &[&f64]) -> Result<(LossBreakdown, Vec<Tensor<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let w = values[0].data[0];
        let n = batch.len() as f64;
        let loss = batch.iter().map(|&&a| (w - a) * (w - a)).sum::<f64>() / n;
        let g = batch.iter().map(|&&a| 2.0 * (w - a)).sum::<f64>() / n;
        Ok((LossBreakdown { total: loss, ..Default::default() }, vec![Tensor::row_vector(vec![g])]))
    }

    fn hvp(&self, _values: &[Tensor<f64>], _batch: &[&f64], dir: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![Tensor::row_vector(vec![2.0 * dir[0].data[0]])])
    }
}

/// Inner-loop settings shared by meta-training and test-time fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerSpec {
    pub mask: ModuleMask,
    pub alpha: f64,
    pub steps: usize,
    pub clip: Option<f64>,
}

struct InnerTrace {
    /// Parameters before each step.
    thetas: Vec<Vec<Tensor<f64>>>,
    /// Masked, pre-clip gradients at each step.
    grads: Vec<Vec<Tensor<f64>>>,
}

/// Masked clipped descent step: `values[i] -= alpha·clip(g)[i]` for flagged tensors.
fn masked_step(values: &mut [Tensor<f64>], grads: &mut [Tensor<f64>], flags: &[bool], alpha: f64, clip: Option<f64>) {
    for (g, &f) in grads.iter_mut().zip(flags) {
        if !f {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if let Some(c) = clip {
        vecops::clip_global_norm(grads, c);
    }
    for ((v, g), &f) in values.iter_mut().zip(grads.iter()).zip(flags) {
        if f {
            for (a, b) in v.data.iter_mut().zip(&g.data) {
                *a -= alpha * b;
            }
        }
    }
}

fn inner_loop<L: Learner>(
    learner: &L,
    params: &ParamSet,
    support: &[&L::Item],
    spec: &InnerSpec,
    mut on_step: impl FnMut(usize, &LossBreakdown, &[Tensor<f64>]),
    keep_trace: bool,
) -> Result<(Vec<Tensor<f64>>, Option<InnerTrace>)> {
    if support.is_empty() {
        return Err(Error::Input("empty support set".into()));
    }
    let flags = spec.mask.tensor_flags(params);
    let mut values = params.values.clone();
    let mut trace = keep_trace.then(|| InnerTrace { thetas: Vec::new(), grads: Vec::new() });
    for k in 0..spec.steps {
        let (loss, mut g) = learner.loss_grad(&values, support)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite support loss at inner step {k}")));
        }
        on_step(k, &loss, &values);
        for (t, &f) in g.iter_mut().zip(&flags) {
            if !f {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.thetas.push(values.clone());
            tr.grads.push(g.clone());
        }
        masked_step(&mut values, &mut g, &flags, spec.alpha, spec.clip);
    }
    Ok((values, trace))
}

/// `N` masked gradient steps on the support loss. Unflagged tensors are
/// copied bit-for-bit; `params` is not modified.
pub fn inner_adapt_set<L: Learner>(learner: &L, params: &ParamSet, support: &[&L::Item], spec: &InnerSpec) -> Result<ParamSet> {
    let (values, _) = inner_loop(learner, params, support, spec, |_, _, _| {}, false)?;
    let mut out = params.clone();
    out.values = values;
    Ok(out)
}

/// Like [`inner_adapt_set`], calling `snapshot(step, values)` at each step
/// in `marks` (step 0 is the input). Returns the support loss at every
/// requested mark.
pub fn adapt_with_marks<L: Learner>(
    learner: &L,
    params: &ParamSet,
    support: &[&L::Item],
    spec: &InnerSpec,
    marks: &[usize],
    mut snapshot: impl FnMut(usize, &LossBreakdown, &[Tensor<f64>]) -> Result<()>,
) -> Result<Vec<(usize, LossBreakdown)>> {
    let mut out = Vec::new();
    let mut err = None;
    let (values, _) = inner_loop(
        learner,
        params,
        support,
        spec,
        |k, loss, vals| {
            if marks.contains(&k) && err.is_none() {
                out.push((k, *loss));
                if let Err(e) = snapshot(k, loss, vals) {
                    err = Some(e);
                }
            }
        },
        false,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    if marks.contains(&spec.steps) {
        let (loss, _) = learner.loss_grad(&values, support)?;
        out.push((spec.steps, loss));
        snapshot(spec.steps, &loss, &values)?;
    }
    Ok(out)
}

/// [`inner_adapt_set`] on the acoustic model.
pub fn inner_adapt(
    model: &FastSpeech,
    params: &ModelParameters,
    support: &[&Utterance],
    mask: ModuleMask,
    alpha: f64,
    steps: usize,
    clip: Option<f64>,
) -> Result<ModelParameters> {
    let learner = TtsLearner::new(model, params);
    let set = inner_adapt_set(&learner, &params.set, support, &InnerSpec { mask, alpha, steps, clip })?;
    Ok(ModelParameters { set, ..params.clone() })
}

/// `P·J·P·v` for the clip at gradient `g`, where `P` zeroes unflagged
/// tensors and `J` is the Jacobian of `g ↦ g·min(1, c/‖g‖)`.
fn clip_jacobian_vp(g: &[Tensor<f64>], v: &[Tensor<f64>], flags: &[bool], clip: Option<f64>) -> Vec<Tensor<f64>> {
    let mut u: Vec<Tensor<f64>> = v
        .iter()
        .zip(flags)
        .map(|(t, &f)| if f { t.clone() } else { Tensor::zeros(t.rows, t.cols) })
        .collect();
    if let Some(c) = clip {
        let n = vecops::norm(g);
        if n > c {
            let gv = vecops::dot(g, &u) / (n * n);
            vecops::axpy(&mut u, -gv, g);
            vecops::scale(&mut u, c / n);
        }
    }
    u
}

/// One task's contribution: query loss at the adapted parameters and the
/// gradient of that loss with respect to the initialization.
pub struct TaskGradient {
    pub query_loss: LossBreakdown,
    pub grad: Vec<Tensor<f64>>,
}

pub fn task_meta_gradient<L: Learner>(
    learner: &L,
    params: &ParamSet,
    support: &[&L::Item],
    query: &[&L::Item],
    spec: &InnerSpec,
    order: Order,
) -> Result<TaskGradient> {
    if query.is_empty() {
        return Err(Error::Input("empty query set".into()));
    }
    let second = order == Order::Second;
    let (adapted, trace) = inner_loop(learner, params, support, spec, |_, _, _| {}, second)?;
    let (query_loss, mut v) = learner.loss_grad(&adapted, query)?;
    if !query_loss.total.is_finite() {
        return Err(Error::Numeric("non-finite query loss".into()));
    }
    if let Some(tr) = trace {
        let flags = spec.mask.tensor_flags(params);
        for k in (0..spec.steps).rev() {
            let u = clip_jacobian_vp(&tr.grads[k], &v, &flags, spec.clip);
            if u.iter().all(|t| t.data.iter().all(|&x| x == 0.0)) {
                continue;
            }
            let h = learner.hvp(&tr.thetas[k], support, &u)?;
            vecops::axpy(&mut v, -spec.alpha, &h);
        }
    }
    Ok(TaskGradient { query_loss, grad: v })
}

/// A task as borrowed support and query items.
pub struct TaskData<'a, I> {
    pub support: Vec<&'a I>,
    pub query: Vec<&'a I>,
}

/// Average of per-task meta-gradients and query losses, reduced in task
/// order. With `workers > 1` tasks run on a thread pool; the reduction
/// order does not change.
pub fn meta_gradient<L: Learner>(
    learner: &L,
    params: &ParamSet,
    tasks: &[TaskData<'_, L::Item>],
    spec: &InnerSpec,
    order: Order,
    workers: usize,
) -> Result<TaskGradient> {
    if tasks.is_empty() {
        return Err(Error::Input("no tasks".into()));
    }
    let run = |t: &TaskData<'_, L::Item>| task_meta_gradient(learner, params, &t.support, &t.query, spec, order);
    let per_task: Vec<Result<TaskGradient>> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run).collect())
    } else {
        tasks.iter().map(run).collect()
    };
    let w = 1.0 / tasks.len() as f64;
    let mut grad = params.zeros_like();
    let mut query_loss = LossBreakdown::default();
    for r in per_task {
        let tg = r?;
        for (a, b) in grad.iter_mut().zip(&tg.grad) {
            a.accumulate(b);
        }
        query_loss.accumulate(&tg.query_loss, w);
    }
    vecops::scale(&mut grad, w);
    Ok(TaskGradient { query_loss, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepStats {
    pub meta_loss: LossBreakdown,
    pub grad_norm: f64,
}

/// One outer update: returns new parameters; `params` is left untouched.
pub fn meta_step<L: Learner>(
    learner: &L,
    params: &ParamSet,
    opt: &mut Optimizer,
    tasks: &[TaskData<'_, L::Item>],
    cfg: &MetaConfig,
    mask: ModuleMask,
    workers: usize,
) -> Result<(ParamSet, MetaStepStats)> {
    if tasks.len() != cfg.tasks_per_step {
        return Err(Error::Input(format!("meta step expects M = {} tasks, got {}", cfg.tasks_per_step, tasks.len())));
    }
    let spec = InnerSpec { mask, alpha: cfg.alpha, steps: cfg.inner_steps, clip: cfg.inner_clip };
    let mut tg = meta_gradient(learner, params, tasks, &spec, cfg.order, workers)?;
    let mut out = params.clone();
    let grad_norm = opt.apply(&mut out, &mut tg.grad, cfg.beta, cfg.outer_clip);
    if !grad_norm.is_finite() || !out.is_finite() {
        return Err(Error::Numeric("non-finite meta gradient".into()));
    }
    Ok((out, MetaStepStats { meta_loss: tg.query_loss, grad_norm }))
}

/// Per-step training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mel_loss: f64,
    pub duration_loss: f64,
    pub pitch_loss: f64,
    pub energy_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn new(step: usize, l: &LossBreakdown, grad_norm: f64, wall_ms: f64) -> Self {
        Self {
            step,
            loss: l.total,
            mel_loss: l.mel_loss,
            duration_loss: l.duration_loss,
            pitch_loss: l.pitch_loss,
            energy_loss: l.energy_loss,
            grad_norm,
            wall_ms,
        }
    }
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: usize,
    pub params: ModelParameters,
    pub optimizer: Optimizer,
}

/// Runtime knobs that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub workers: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

pub const OPT_PREFIX: &str = "outer";

fn meta_info(cfg: &MetaConfig, mask: ModuleMask, seed: u64, step: usize) -> BTreeMap<String, serde_json::Value> {
    let mut info = BTreeMap::new();
    info.insert("approach".into(), serde_json::json!("meta"));
    info.insert("mask".into(), serde_json::json!(mask.to_string()));
    info.insert("meta_config".into(), serde_json::to_value(cfg).expect("config serializes"));
    info.insert("seed".into(), serde_json::json!(seed));
    info.insert("step".into(), serde_json::json!(step));
    // episode sampling is re-derived from (seed, step), so this pair is the whole rng state
    info.insert("rng".into(), serde_json::json!({ "scheme": "chacha8-per-step", "seed": seed, "next_step": step }));
    info
}

impl TrainState {
    pub fn init(model: &FastSpeech, corpus: &Corpus, optimizer: OptimizerKind, seed: u64) -> Result<Self> {
        let params = model.init_params(&corpus.speaker_ids(), mix_seed(seed, 0x1417))?;
        let optimizer = Optimizer::new(optimizer, &params.set);
        Ok(Self { step: 0, params, optimizer })
    }

    pub fn to_checkpoint(&self, model: &FastSpeech, info: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        Checkpoint {
            model_config: model.config().clone(),
            params: self.params.clone(),
            info,
            extra: self.optimizer.to_extra(OPT_PREFIX),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, kind: OptimizerKind) -> Result<Self> {
        let step = ck
            .info
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("checkpoint has no step counter".into()))? as usize;
        let optimizer = Optimizer::from_extra(kind, &ck.params.set, &ck.extra, OPT_PREFIX)?;
        Ok(Self { step, params: ck.params.clone(), optimizer })
    }
}

/// Resolve episodes into borrowed task data.
pub fn task_data<'a>(corpus: &'a Corpus, episodes: &[TaskEpisode]) -> Result<Vec<TaskData<'a, Utterance>>> {
    episodes
        .iter()
        .map(|e| Ok(TaskData { support: e.support_utts(corpus)?, query: e.query_utts(corpus)? }))
        .collect()
}

/// The `M` episodes of step `step`, drawn from a generator derived from
/// `(seed, step)` so that any step can be replayed in isolation.
pub fn step_episodes(sampler: &EpisodeSampler, cfg: &MetaConfig, seed: u64, step: usize) -> Result<Vec<TaskEpisode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x3E7A), step as u64));
    (0..cfg.tasks_per_step)
        .map(|i| {
            let mut e = sampler.sample(cfg.k_shot, cfg.query(), &mut rng)?;
            e.task_id = i;
            Ok(e)
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, tag: &str, step: usize) -> PathBuf {
    dir.join(format!("{tag}-step{step:06}.ckpt"))
}

/// Run meta-training from `state` up to `cfg.total_meta_steps`, calling
/// `on_step` after every step.
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    model: &FastSpeech,
    corpus: &Corpus,
    cfg: &MetaConfig,
    mask: ModuleMask,
    seed: u64,
    mut state: TrainState,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    mask.validate()?;
    if mask.is_empty() {
        return Err(Error::Config("meta-training needs a non-empty module mask".into()));
    }
    model.config().matches_corpus(&corpus.config)?;
    model.check_params(&state.params)?;
    let sampler = EpisodeSampler::new(corpus)?;
    while state.step < cfg.total_meta_steps {
        let t0 = Instant::now();
        let episodes = step_episodes(&sampler, cfg, seed, state.step)?;
        let tasks = task_data(corpus, &episodes)?;
        let learner = TtsLearner::new(model, &state.params);
        let (set, stats) = meta_step(&learner, &state.params.set, &mut state.optimizer, &tasks, cfg, mask, opts.workers)?;
        state.params.set = set;
        state.step += 1;
        on_step(&StepRecord::new(state.step, &stats.meta_loss, stats.grad_norm, t0.elapsed().as_secs_f64() * 1e3));
        if let Some(dir) = &opts.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every);
            if periodic || state.step == cfg.total_meta_steps {
                state
                    .to_checkpoint(model, meta_info(cfg, mask, seed, state.step))
                    .save(&checkpoint_path(dir, "meta", state.step))?;
            }
        }
    }
    Ok(state)
}

/// Checkpoint of a meta-training state with the run's config echo.
pub fn meta_checkpoint(model: &FastSpeech, state: &TrainState, cfg: &MetaConfig, mask: ModuleMask, seed: u64) -> Checkpoint {
    state.to_checkpoint(model, meta_info(cfg, mask, seed, state.step))
}

/// The adaptation mask recorded in a meta-learned checkpoint, if any.
pub fn checkpoint_meta_mask(ck: &Checkpoint) -> Result<Option<ModuleMask>> {
    if ck.info_str("approach") != Some("meta") {
        return Ok(None);
    }
    let s = ck.info_str("mask").ok_or_else(|| Error::Config("meta checkpoint lacks its mask".into()))?;
    s.parse().map(Some)
}

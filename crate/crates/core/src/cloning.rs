//! Few-shot voice cloning: unseen-speaker preparation, support-set
//! fine-tuning along a grid of step marks, and free-run query synthesis.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{encode_speaker_reference, SpeakerEncoder};
use crate::corpus::{Corpus, FeatureView, Utterance};
use crate::episodes::TaskEpisode;
use crate::error::{Error, Result};
use crate::metalearn::{adapt_with_marks, InnerSpec, ModuleMask, TtsLearner};
use crate::model::{EmbMode, FastSpeech, LossBreakdown, ModelInput, ModelParameters, ParamMeta, ParamSet, SpeakerRef};
use crate::tensor::Tensor;

pub const DEFAULT_MARKS: [usize; 6] = [0, 5, 10, 20, 50, 100];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenInit {
    #[default]
    Zero,
    MeanOfTrainRows,
}

/// Replace the training store with fresh rows for `test_ids` (table mode).
pub fn prepare_unseen(params: &ModelParameters, test_ids: &[u32], strategy: UnseenInit) -> Result<ModelParameters> {
    if params.emb_mode == EmbMode::Shared {
        return Err(Error::Config("prepare_unseen applies to table mode; a shared embedding transfers as-is".into()));
    }
    let mut ids = test_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Input("no test speakers".into()));
    }
    let store = params.spk_store();
    let fill = match strategy {
        UnseenInit::Zero => vec![0.0; store.cols],
        UnseenInit::MeanOfTrainRows => {
            let mut m = vec![0.0; store.cols];
            for r in 0..store.rows {
                m.iter_mut().zip(store.row(r)).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= store.rows as f64);
            m
        }
    };
    let new_store = Tensor::from_vec(ids.len(), store.cols, fill.repeat(ids.len()));
    let si = params.spk_store_index();
    let mut meta = params.set.meta().to_vec();
    meta[si] = ParamMeta { rows: ids.len(), ..meta[si].clone() };
    let mut values = params.set.values.clone();
    values[si] = new_store;
    Ok(ModelParameters {
        set: ParamSet::new(meta, values),
        emb_mode: EmbMode::Table,
        speaker_rows: ids.iter().enumerate().map(|(r, &id)| (id, r)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub mask: ModuleMask,
    pub marks: Vec<usize>,
    pub lr: f64,
    pub clip: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { mask: ModuleMask::ALL, marks: DEFAULT_MARKS.to_vec(), lr: 1e-2, clip: Some(1.0) }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.marks.is_empty() {
            return Err(Error::Config("at least one step mark is required".into()));
        }
        if self.marks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("step marks must be strictly increasing".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("fine-tuning lr {} is invalid", self.lr)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.marks.last().copied().unwrap_or(0)
    }
}

/// A meta-trained initialization only suits the modules it was trained to adapt.
pub fn check_eval_mask(meta_mask: Option<ModuleMask>, mask: ModuleMask) -> Result<()> {
    match meta_mask {
        Some(m) if m != mask => {
            Err(Error::Config(format!("evaluation mask {mask} differs from the meta-training mask {m}")))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct AdaptSnapshot {
    pub mark: usize,
    pub support_loss: LossBreakdown,
    pub params: ModelParameters,
}

/// Full-batch fine-tuning on the task's support set, capturing a snapshot at
/// every mark. `params` must already hold a row for the task speaker.
pub fn adapt_to_task(
    model: &FastSpeech,
    params: &ModelParameters,
    meta_mask: Option<ModuleMask>,
    task: &TaskEpisode,
    corpus: &Corpus,
    cfg: &AdaptConfig,
) -> Result<Vec<AdaptSnapshot>> {
    cfg.validate()?;
    check_eval_mask(meta_mask, cfg.mask)?;
    let support = task.support_utts(corpus)?;
    let learner = TtsLearner::new(model, params);
    let spec = InnerSpec { mask: cfg.mask, alpha: cfg.lr, steps: cfg.steps(), clip: cfg.clip };
    let mut snaps = Vec::with_capacity(cfg.marks.len());
    adapt_with_marks(&learner, &params.set, &support, &spec, &cfg.marks, |mark, loss, values| {
        let mut p = params.clone();
        p.set.values = values.to_vec();
        snaps.push(AdaptSnapshot { mark, support_loss: *loss, params: p });
        Ok(())
    })?;
    Ok(snaps)
}

/// Free-run synthesis of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub query_id: u32,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub n_mel: usize,
    pub mel: Vec<f64>,
}

impl SynthOutput {
    pub fn n_frames(&self) -> usize {
        self.mel.len() / self.n_mel.max(1)
    }
}

impl<'a> From<&'a SynthOutput> for FeatureView<'a> {
    fn from(s: &'a SynthOutput) -> Self {
        FeatureView {
            phonemes: &s.phonemes,
            durations: &s.durations,
            pitch: &s.pitch,
            energy: &s.energy,
            n_mel: s.n_mel,
            mel: &s.mel,
        }
    }
}

/// Synthesize every query item of `task` from its phonemes alone.
pub fn synthesize_query(
    model: &FastSpeech,
    params: &ModelParameters,
    speaker: &SpeakerRef,
    task: &TaskEpisode,
    corpus: &Corpus,
) -> Result<Vec<SynthOutput>> {
    let query = task.query_utts(corpus)?;
    if query.is_empty() {
        return Err(Error::Input(format!("task {} has an empty query set", task.task_id)));
    }
    query.iter().map(|u| synthesize_one(model, params, speaker, u)).collect()
}

fn synthesize_one(model: &FastSpeech, params: &ModelParameters, speaker: &SpeakerRef, u: &Utterance) -> Result<SynthOutput> {
    let out = model.forward(params, &ModelInput { phonemes: &u.phonemes, speaker: speaker.clone() }, None)?;
    if !out.mel_pred.data.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite synthesis for query {}", u.id)));
    }
    Ok(SynthOutput {
        query_id: u.id,
        phonemes: u.phonemes.clone(),
        durations: out.durations,
        pitch: out.pitch_pred,
        energy: out.energy_pred,
        n_mel: out.mel_pred.cols,
        mel: out.mel_pred.data,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkResult {
    pub mark: usize,
    /// Absent on the speaker-encoding path, which never fine-tunes.
    pub support_loss: Option<LossBreakdown>,
    pub outputs: Vec<SynthOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub speaker_id: u32,
    pub approach: String,
    pub mask: String,
    pub emb_mode: EmbMode,
    pub manifest_hash: String,
    pub marks: Vec<MarkResult>,
}

/// What is being evaluated.
pub enum Cloner<'a> {
    /// Fine-tune a trained TTS on each support set.
    Adaptation {
        approach: String,
        params: &'a ModelParameters,
        meta_mask: Option<ModuleMask>,
        init: UnseenInit,
    },
    /// Encode the support set into a speaker vector; no fine-tuning.
    Encoding { approach: String, params: &'a ModelParameters, encoder: &'a SpeakerEncoder },
}

impl Cloner<'_> {
    pub fn approach(&self) -> &str {
        match self {
            Cloner::Adaptation { approach, .. } | Cloner::Encoding { approach, .. } => approach,
        }
    }
}

/// Run every task; results come back in task order regardless of `workers`.
pub fn run_sweep(
    model: &FastSpeech,
    cloner: &Cloner<'_>,
    corpus: &Corpus,
    tasks: &[TaskEpisode],
    manifest_hash: &str,
    cfg: &AdaptConfig,
    workers: usize,
) -> Result<Vec<TaskResult>> {
    cfg.validate()?;
    for t in tasks {
        t.validate(corpus)?;
    }
    let prepared = match cloner {
        Cloner::Adaptation { params, meta_mask, init, .. } => {
            check_eval_mask(*meta_mask, cfg.mask)?;
            model.check_params(params)?;
            Some(match params.emb_mode {
                EmbMode::Table => prepare_unseen(params, &corpus.speaker_ids(), *init)?,
                EmbMode::Shared => (*params).clone(),
            })
        }
        Cloner::Encoding { params, .. } => {
            model.check_params(params)?;
            None
        }
    };
    let run = |t: &TaskEpisode| run_task(model, cloner, prepared.as_ref(), corpus, t, manifest_hash, cfg);
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run).collect())
    } else {
        tasks.iter().map(run).collect()
    }
}

fn run_task(
    model: &FastSpeech,
    cloner: &Cloner<'_>,
    prepared: Option<&ModelParameters>,
    corpus: &Corpus,
    task: &TaskEpisode,
    manifest_hash: &str,
    cfg: &AdaptConfig,
) -> Result<TaskResult> {
    let (marks, mask, emb_mode) = match cloner {
        Cloner::Adaptation { meta_mask, .. } => {
            let params = prepared.expect("adaptation parameters prepared");
            let snaps = adapt_to_task(model, params, *meta_mask, task, corpus, cfg)?;
            let marks = snaps
                .into_iter()
                .map(|s| {
                    Ok(MarkResult {
                        mark: s.mark,
                        support_loss: Some(s.support_loss),
                        outputs: synthesize_query(model, &s.params, &SpeakerRef::Id(task.speaker_id), task, corpus)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (marks, cfg.mask.to_string(), params.emb_mode)
        }
        Cloner::Encoding { params, encoder, .. } => {
            let refs = task.support_utts(corpus)?;
            let v = encode_speaker_reference(encoder, &refs)?;
            let outputs = synthesize_query(model, params, &SpeakerRef::Vector(v), task, corpus)?;
            (vec![MarkResult { mark: 0, support_loss: None, outputs }], ModuleMask::NONE.to_string(), params.emb_mode)
        }
    };
    Ok(TaskResult {
        task_id: task.task_id,
        speaker_id: task.speaker_id,
        approach: cloner.approach().to_string(),
        mask,
        emb_mode,
        manifest_hash: manifest_hash.to_string(),
        marks,
    })
}

/// Mean support loss per mark, for quick trend summaries.
pub fn support_loss_trend(results: &[TaskResult]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in results {
        for m in &r.marks {
            if let Some(l) = m.support_loss {
                let e = acc.entry(m.mark).or_default();
                e.0 += l.total;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

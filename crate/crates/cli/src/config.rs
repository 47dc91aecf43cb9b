//! Experiment configuration: one TOML document per run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use metatts::baselines::{BaselineConfig, EncoderConfig, EncoderSetting};
use metatts::cloning::{AdaptConfig, UnseenInit};
use metatts::corpus::CorpusConfig;
use metatts::error::Error;
use metatts::metalearn::{MetaConfig, ModuleMask};
use metatts::metrics::ReportConfig;
use metatts::model::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Meta,
    Multitask,
    SpkEnc,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approach::Meta => "meta",
            Approach::Multitask => "multitask",
            Approach::SpkEnc => "spk_enc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Holds `train/` and `test/` corpora.
    pub dir: PathBuf,
    pub n_train_speakers: usize,
    pub n_test_speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub config: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("corpus"),
            n_train_speakers: 20,
            n_test_speakers: 10,
            utts_per_speaker: 20,
            seed: 0,
            config: CorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub approach: Approach,
    pub mask: ModuleMask,
    pub encoder_setting: EncoderSetting,
    /// Frozen encoder checkpoint standing in for the oracle embedder.
    pub frozen_encoder: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            approach: Approach::Meta,
            mask: ModuleMask::ALL,
            encoder_setting: EncoderSetting::ScratchJoint,
            frozen_encoder: None,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to the run's final checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub tasks_per_speaker: usize,
    pub k_shot: usize,
    pub task_seed: u64,
    /// Frozen task manifest; built on first use when missing.
    pub manifest: Option<PathBuf>,
    pub init: UnseenInit,
    pub adapt: AdaptConfig,
    pub report: ReportConfig,
    /// Defaults to `<out_dir>/eval`.
    pub out: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            tasks_per_speaker: 16,
            k_shot: 5,
            task_seed: 0,
            manifest: None,
            init: UnseenInit::Zero,
            adapt: AdaptConfig::default(),
            report: ReportConfig::default(),
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub meta: MetaConfig,
    pub baseline: BaselineConfig,
    pub encoder: EncoderConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            meta: MetaConfig::default(),
            baseline: BaselineConfig::default(),
            encoder: EncoderConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn cfg_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

/// Dotted paths of keys present in `given` that did not survive a
/// deserialize/serialize round trip.
fn unknown_keys(given: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, Error> {
        let value: toml::Value = toml::from_str(text).map_err(|e| cfg_err(format!("{}: {e}", origin.display())))?;
        let cfg: Self = value.clone().try_into().map_err(|e| cfg_err(format!("{}: {e}", origin.display())))?;
        // Option fields that are set serialize back, so anything missing is a real typo
        let back = toml::Value::try_from(&cfg).map_err(|e| cfg_err(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &back, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(cfg_err(format!("{}: unknown keys {}", origin.display(), unknown.join(", "))));
        }
        Ok(cfg)
    }

    /// Read a config and resolve its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.corpus.dir);
        for p in [&mut cfg.train.frozen_encoder, &mut cfg.train.resume, &mut cfg.eval.checkpoint, &mut cfg.eval.manifest, &mut cfg.eval.out]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate_corpus(&self) -> Result<(), Error> {
        let c = &self.corpus;
        c.config.validate()?;
        if c.n_train_speakers == 0 || c.n_test_speakers == 0 {
            return Err(cfg_err("corpus needs at least one train and one test speaker"));
        }
        if c.utts_per_speaker < 2 * c.config.k_shot.max(1) {
            return Err(cfg_err(format!("utts_per_speaker = {} is below 2K = {}", c.utts_per_speaker, 2 * c.config.k_shot)));
        }
        Ok(())
    }

    pub fn validate_train(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.model.matches_corpus(&self.corpus.config)?;
        self.train.mask.validate()?;
        match self.train.approach {
            Approach::Meta => {
                self.meta.validate()?;
                if self.train.mask.is_empty() {
                    return Err(cfg_err("meta-training needs a non-empty mask"));
                }
                let need = self.meta.k_shot + self.meta.query();
                if self.corpus.utts_per_speaker < need {
                    return Err(cfg_err(format!("episodes need {need} utterances per speaker, corpus has {}", self.corpus.utts_per_speaker)));
                }
            }
            Approach::Multitask | Approach::SpkEnc => {
                self.baseline.validate()?;
                let budget = self.meta.samples_per_step();
                if self.baseline.batch_size != budget {
                    return Err(cfg_err(format!(
                        "baseline batch_size {} must equal the meta-learner's per-step budget M·(K+Q) = {budget}",
                        self.baseline.batch_size
                    )));
                }
                let total = self.corpus.n_train_speakers * self.corpus.utts_per_speaker;
                if self.baseline.batch_size > total {
                    return Err(cfg_err(format!("batch_size {} exceeds the training corpus ({total} utterances)", self.baseline.batch_size)));
                }
            }
        }
        if self.train.approach == Approach::SpkEnc {
            if self.train.frozen_encoder.is_some() && self.train.encoder_setting != EncoderSetting::FixedOracle {
                return Err(cfg_err("frozen_encoder only applies to the fixed_oracle setting"));
            }
            if self.encoder.hidden_dim == 0 {
                return Err(cfg_err("encoder hidden_dim must be positive"));
            }
        }
        if self.workers == 0 {
            return Err(cfg_err("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn validate_eval(&self) -> Result<(), Error> {
        self.validate_train()?;
        let e = &self.eval;
        e.adapt.validate()?;
        if e.tasks_per_speaker == 0 || e.k_shot == 0 {
            return Err(cfg_err("tasks_per_speaker and k_shot must be positive"));
        }
        if self.corpus.utts_per_speaker < e.k_shot + 1 {
            return Err(cfg_err(format!("evaluation needs K+1 = {} utterances per speaker", e.k_shot + 1)));
        }
        if !(0.0..=1.0).contains(&e.report.same_ratio) {
            return Err(cfg_err("report.same_ratio must lie in [0, 1]"));
        }
        if self.train.approach == Approach::Meta && e.adapt.mask != self.train.mask {
            return Err(cfg_err(format!("evaluation mask {} differs from the meta-training mask {}", e.adapt.mask, self.train.mask)));
        }
        Ok(())
    }

    /// `meta`, `multitask`, `spk_enc_<setting>`: prefix of checkpoint files.
    pub fn run_tag(&self) -> String {
        match self.train.approach {
            Approach::SpkEnc => format!("spk_enc_{}", self.train.encoder_setting),
            a => a.to_string(),
        }
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.out_dir.join(format!("{}-final.ckpt", self.run_tag())))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.eval.out.clone().unwrap_or_else(|| self.out_dir.join("eval"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.eval.manifest.clone().unwrap_or_else(|| {
            self.corpus.dir.join(format!("tasks-k{}-t{}-s{}.jsonl", self.eval.k_shot, self.eval.tasks_per_speaker, self.eval.task_seed))
        })
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "meta" => Ok(Approach::Meta),
            "multitask" => Ok(Approach::Multitask),
            "spk_enc" => Ok(Approach::SpkEnc),
            other => Err(cfg_err(format!("unknown approach {other:?}"))),
        }
    }
}

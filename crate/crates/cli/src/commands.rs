use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use metatts::baselines::{
    checkpoint_approach, load_spk_enc, multitask_checkpoint, train_multitask, train_speaker_encoder_tts, SpeakerEncoder,
    SpkEncState,
};
use metatts::cloning::{check_eval_mask, run_sweep, Cloner, TaskResult};
use metatts::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, PhonemeTemplates, Split};
use metatts::episodes::{build_eval_tasks, read_manifest, write_manifest, TaskEpisode};
use metatts::io::{read_to_string, sha256_hex, to_precise_json, write_atomic};
use metatts::metalearn::{checkpoint_meta_mask, meta_checkpoint, meta_train, RunOptions, StepRecord, TrainState};
use metatts::metrics::{build_report, curve_text, embedding_dump, real_embeddings, synth_embeddings, MetricReport};
use metatts::model::checkpoint::{Checkpoint, MAGIC};
use metatts::model::{FastSpeech, Partition};
use metatts::Error;
use serde_json::json;

use crate::config::{Approach, ExperimentConfig};

pub struct Env {
    pub workers: Option<usize>,
    pub deterministic: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    MetaTrain,
    TrainBaseline,
}

const LOCK_NAME: &str = ".metatts.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(anyhow!(e).context(format!("creating {}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(path: &Path, env: Option<&Env>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(w) = env.and_then(|e| e.workers) {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn test_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

pub fn gen_corpus(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, None)?;
    cfg.validate_corpus()?;
    let c = &cfg.corpus;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| c.dir.clone());
    let _lock = DirLock::acquire(&dir)?;
    let train = generate_corpus(c.n_train_speakers, c.utts_per_speaker, c.seed, Split::Train, &c.config)?;
    let test = generate_corpus(c.n_test_speakers, c.utts_per_speaker, test_seed(c.seed), Split::Test, &c.config)?;
    save_corpus(&train, &dir.join("train"))?;
    save_corpus(&test, &dir.join("test"))?;
    log::info!(
        "wrote {} train / {} test speakers ({} + {} utterances) to {}",
        train.speakers.len(),
        test.speakers.len(),
        train.utterances.len(),
        test.utterances.len(),
        dir.display()
    );
    Ok(())
}

fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Corpus> {
    let dir = cfg.corpus.dir.join(split);
    let c = load_corpus(&dir).with_context(|| format!("loading the {split} corpus (run gen-corpus first)"))?;
    cfg.model.matches_corpus(&c.config)?;
    Ok(c)
}

struct StepLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
    every: usize,
    total: usize,
    last: Option<StepRecord>,
}

impl StepLog {
    fn open(path: &Path, append: bool, total: usize) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { out: BufWriter::new(f), error: None, every: (total / 20).max(1), total, last: None })
    }

    fn record(&mut self, r: &StepRecord) {
        if self.error.is_none() {
            let line = serde_json::to_string(r).expect("step record serializes");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
        if r.step.is_multiple_of(self.every) || r.step == self.total {
            log::info!("step {}/{} loss {:.5} grad-norm {:.4}", r.step, self.total, r.loss, r.grad_norm);
        }
        self.last = Some(r.clone());
    }

    fn finish(mut self) -> Result<Option<StepRecord>> {
        if let Some(e) = self.error.take() {
            return Err(anyhow!(e).context("writing the training log"));
        }
        self.out.flush().context("writing the training log")?;
        Ok(self.last)
    }
}

enum Start {
    Fresh,
    Resume(Checkpoint),
}

pub fn train(config: &Path, env: &Env, verb: Verb) -> Result<()> {
    let cfg = load_config(config, Some(env))?;
    cfg.validate_train()?;
    let approach = cfg.train.approach;
    match (verb, approach) {
        (Verb::MetaTrain, Approach::Meta) => {}
        (Verb::TrainBaseline, Approach::Multitask | Approach::SpkEnc) => {}
        (Verb::MetaTrain, a) => return Err(Error::Config(format!("meta-train needs approach = \"meta\", config has {a:?}")).into()),
        (Verb::TrainBaseline, _) => {
            return Err(Error::Config("train-baseline needs approach = \"multitask\" or \"spk_enc\"".into()).into())
        }
    }
    let corpus = load_split(&cfg, "train")?;
    let model = FastSpeech::new(cfg.model.clone())?;
    let start = match &cfg.train.resume {
        None => Start::Fresh,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model_config != cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model config", p.display())).into());
            }
            let have = checkpoint_approach(&ck)?;
            let want = match approach {
                Approach::SpkEnc => cfg.train.encoder_setting.approach_tag(),
                a => a.to_string(),
            };
            if have != want {
                return Err(Error::Config(format!("cannot resume a {have} checkpoint as {want}")).into());
            }
            if approach == Approach::Meta && checkpoint_meta_mask(&ck)? != Some(cfg.train.mask) {
                return Err(Error::Config(format!("{} was meta-trained with a different mask", p.display())).into());
            }
            Start::Resume(ck)
        }
    };
    let frozen = match (&cfg.train.frozen_encoder, approach) {
        (Some(p), Approach::SpkEnc) => Some(load_spk_enc(p, &corpus)?.1),
        _ => None,
    };

    let tag = cfg.run_tag();
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let opts = RunOptions { workers: cfg.workers, checkpoint_dir: Some(cfg.out_dir.join("checkpoints")) };
    let total = match approach {
        Approach::Meta => cfg.meta.total_meta_steps,
        _ => cfg.baseline.steps,
    };
    let resuming = matches!(start, Start::Resume(_));
    let mut log = StepLog::open(&cfg.out_dir.join("train_log.jsonl"), resuming, total)?;
    let t0 = Instant::now();
    let mut on_step = |r: &StepRecord| log.record(r);
    let ck = match approach {
        Approach::Meta => {
            let state = match &start {
                Start::Fresh => TrainState::init(&model, &corpus, cfg.meta.optimizer, cfg.seed)?,
                Start::Resume(ck) => TrainState::from_checkpoint(ck, cfg.meta.optimizer)?,
            };
            let state = meta_train(&model, &corpus, &cfg.meta, cfg.train.mask, cfg.seed, state, &opts, &mut on_step)?;
            meta_checkpoint(&model, &state, &cfg.meta, cfg.train.mask, cfg.seed)
        }
        Approach::Multitask => {
            let state = match &start {
                Start::Fresh => TrainState::init(&model, &corpus, cfg.baseline.optimizer, cfg.seed)?,
                Start::Resume(ck) => TrainState::from_checkpoint(ck, cfg.baseline.optimizer)?,
            };
            let state = train_multitask(&model, &corpus, &cfg.baseline, cfg.seed, state, &opts, &mut on_step)?;
            multitask_checkpoint(&model, &state, &cfg.baseline, cfg.seed)
        }
        Approach::SpkEnc => {
            let state = match &start {
                Start::Fresh => SpkEncState::init(
                    &model,
                    &corpus,
                    cfg.train.encoder_setting,
                    &cfg.encoder,
                    &cfg.baseline,
                    frozen.as_ref(),
                    cfg.seed,
                )?,
                Start::Resume(ck) => SpkEncState::from_checkpoint(ck, &corpus, cfg.baseline.optimizer)?,
            };
            let state = train_speaker_encoder_tts(&model, &corpus, &cfg.baseline, cfg.seed, state, &opts, &mut on_step)?;
            state.to_checkpoint(&model, &cfg.baseline, cfg.seed)
        }
    };
    drop(on_step);
    let last = log.finish()?;
    let final_name = format!("{tag}-final.ckpt");
    let sha = ck.save(&cfg.out_dir.join(&final_name))?;
    let mut run = json!({
        "tag": tag,
        "approach": approach.to_string(),
        "steps": total,
        "final_checkpoint": final_name,
        "checkpoint_sha256": sha,
        "final_loss": last.map(|r| r.loss),
        "config": cfg,
    });
    if !env.deterministic {
        run["wall_seconds"] = json!(t0.elapsed().as_secs_f64());
    }
    write_atomic(&cfg.out_dir.join("run.json"), &to_precise_json(&run)?)?;
    log::info!("{tag}: {total} steps, final checkpoint sha256 {sha}");
    Ok(())
}

/// The frozen manifest for this config, and whether it must still be written.
fn eval_tasks(cfg: &ExperimentConfig, test: &Corpus) -> Result<(Vec<TaskEpisode>, String, bool)> {
    let path = cfg.manifest_path();
    if path.exists() {
        let (tasks, hash) = read_manifest(&path)?;
        for t in &tasks {
            t.validate(test)?;
            if t.k != cfg.eval.k_shot {
                return Err(Error::Config(format!("manifest {} holds {}-shot tasks, config asks for {}", path.display(), t.k, cfg.eval.k_shot)).into());
            }
        }
        Ok((tasks, hash, false))
    } else {
        let tasks = build_eval_tasks(test, cfg.eval.tasks_per_speaker, cfg.eval.k_shot, cfg.eval.task_seed)?;
        let hash = metatts::episodes::manifest_hash(&tasks)?;
        Ok((tasks, hash, true))
    }
}

pub fn adapt_eval(config: &Path, env: &Env) -> Result<()> {
    let cfg = load_config(config, Some(env))?;
    cfg.validate_eval()?;
    let test = load_split(&cfg, "test")?;
    let ck_path = cfg.final_checkpoint();
    let ck_bytes = fs::read(&ck_path).map_err(|e| Error::Io { context: format!("reading {}", ck_path.display()), source: e })?;
    let ck = Checkpoint::from_bytes(&ck_bytes, &ck_path)?;
    let approach = checkpoint_approach(&ck)?;
    let meta_mask = checkpoint_meta_mask(&ck)?;
    check_eval_mask(meta_mask, cfg.eval.adapt.mask)?;
    let model = FastSpeech::new(ck.model_config.clone())?;
    model.config().matches_corpus(&test.config)?;
    model.check_params(&ck.params)?;
    let encoder = if approach.starts_with("spk_enc") { Some(SpeakerEncoder::from_checkpoint(&ck, &test)?) } else { None };
    let (tasks, hash, fresh) = eval_tasks(&cfg, &test)?;

    let dir = cfg.eval_dir();
    let _lock = DirLock::acquire(&dir)?;
    if fresh {
        write_manifest(&cfg.manifest_path(), &tasks)?;
        log::info!("froze {} tasks into {}", tasks.len(), cfg.manifest_path().display());
    }
    let cloner = match &encoder {
        Some(enc) => Cloner::Encoding { approach: approach.clone(), params: &ck.params, encoder: enc },
        None => Cloner::Adaptation { approach: approach.clone(), params: &ck.params, meta_mask, init: cfg.eval.init },
    };
    log::info!("{approach}: cloning {} tasks over marks {:?}", tasks.len(), cfg.eval.adapt.marks);
    let results = run_sweep(&model, &cloner, &test, &tasks, &hash, &cfg.eval.adapt, cfg.workers)?;
    write_atomic(&dir.join("results.json"), &to_precise_json(&results)?)?;

    let e = &cfg.eval;
    let echo = json!({
        "checkpoint_sha256": sha256_hex(&ck_bytes),
        "model": ck.model_config,
        "tasks_per_speaker": e.tasks_per_speaker,
        "k_shot": e.k_shot,
        "task_seed": e.task_seed,
        "init": e.init,
        "adapt": e.adapt,
        "report": e.report,
    });
    let report = build_report(&results, &test, &e.report, echo)?;
    write_atomic(&dir.join("report.json"), &to_precise_json(&report)?)?;
    write_artifacts(&dir, &report, &results, &test)?;
    for (mark, m) in &report.marks {
        log::info!(
            "mark {mark:>3}: similarity {:.4} ± {:.4}, EER {:.4}, AUC {:.4}, diagonal {:.2}",
            m.similarity_mean,
            m.similarity_std,
            m.eer,
            m.roc_auc,
            m.diagonal_rate
        );
    }
    Ok(())
}

fn write_artifacts(dir: &Path, report: &MetricReport, results: &[TaskResult], test: &Corpus) -> Result<()> {
    for (mark, m) in &report.marks {
        write_atomic(&dir.join("curves").join(format!("mark{mark:03}-det.txt")), curve_text(&m.det).as_bytes())?;
        write_atomic(&dir.join("curves").join(format!("mark{mark:03}-roc.txt")), curve_text(&m.roc).as_bytes())?;
    }
    let synth = synth_embeddings(results, &PhonemeTemplates::new(&test.config))?;
    for (mark, embs) in &synth {
        write_atomic(&dir.join("embeddings").join(format!("mark{mark:03}.txt")), embedding_dump(embs).as_bytes())?;
    }
    let real: Vec<_> = real_embeddings(test)?.into_values().flatten().collect();
    write_atomic(&dir.join("embeddings").join("real.txt"), embedding_dump(&real).as_bytes())?;
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Io { context: format!("reading {}", path.display()), source: e })?;
    if bytes.starts_with(MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes, path)?;
        println!("checkpoint {}", path.display());
        println!("  sha256      {}", sha256_hex(&bytes));
        println!("  approach    {}", ck.info_str("approach").unwrap_or("?"));
        if let Some(step) = ck.info.get("step") {
            println!("  step        {step}");
        }
        if let Some(mask) = ck.info_str("mask") {
            println!("  meta mask   {mask}");
        }
        if let Some(enc) = ck.info.get("speaker_encoder") {
            println!("  encoder     {enc}");
        }
        let c = &ck.model_config;
        println!("  model       hidden {} blocks {}+{} heads {} emb {} ({:?})", c.hidden_dim, c.n_encoder_blocks, c.n_decoder_blocks, c.n_heads, c.spk_emb_dim, ck.params.emb_mode);
        println!("  speakers    {}", ck.params.speaker_rows.len());
        for p in Partition::ALL {
            let (n, k) = ck.params.set.partition(p).fold((0, 0), |(n, k), (_, t)| (n + 1, k + t.len()));
            println!("  {:<17} {n:>3} tensors {k:>8} scalars", p.to_string());
        }
        println!("  extra       {} tensors", ck.extra.len());
        return Ok(());
    }
    let text = read_to_string(path)?;
    let report: MetricReport = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{} is neither a checkpoint nor a report: {e}", path.display())))?;
    println!("report {} ({} / mask {})", path.display(), report.approach, report.mask);
    println!("  manifest {}  tasks {}  speakers {}", report.manifest_hash, report.n_tasks, report.speakers.len());
    println!("  {:>5} {:>10} {:>8} {:>8} {:>8} {:>6} {:>10}", "mark", "similarity", "std", "eer", "auc", "diag", "support");
    for (mark, m) in &report.marks {
        let sl = m.support_loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into());
        println!(
            "  {mark:>5} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>6.2} {sl:>10}",
            m.similarity_mean, m.similarity_std, m.eer, m.roc_auc, m.diagonal_rate
        );
    }
    Ok(())
}

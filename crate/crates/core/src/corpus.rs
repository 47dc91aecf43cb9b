//! Synthetic multi-speaker corpora with known latent speaker parameters,
//! the analytic utterance embedder, and the on-disk corpus format.
//!
//! Every utterance is rendered from a closed-form recipe, so the embedder
//! can invert it: at zero noise it recovers the speaker's duration scale,
//! pitch offset, energy scale and timbre.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{mix_seed, read_to_string, to_precise_json, write_atomic};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Phoneme inventory size.
    pub n_phonemes: usize,
    pub n_mel: usize,
    pub noise_std: f64,
    pub template_seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Shots per task; every speaker must carry at least `2·k_shot` utterances.
    pub k_shot: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_phonemes: 16, n_mel: 8, noise_std: 0.01, template_seed: 0x7e3a_11, min_len: 4, max_len: 12, k_shot: 5 }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mel < 2 {
            return Err(Error::Config(format!("n_mel must be >= 2, got {}", self.n_mel)));
        }
        if self.n_phonemes == 0 {
            return Err(Error::Config("n_phonemes must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad utterance length range [{}, {}]", self.min_len, self.max_len)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        3 + self.n_mel
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub speaker_id: u32,
    pub duration_scale: f64,
    pub pitch_offset: f64,
    pub energy_scale: f64,
    pub timbre: Vec<f64>,
}

impl SpeakerParams {
    pub fn neutral(speaker_id: u32, n_mel: usize) -> Self {
        Self { speaker_id, duration_scale: 1.0, pitch_offset: 0.0, energy_scale: 1.0, timbre: vec![0.0; n_mel] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub speaker_id: u32,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub n_mel: usize,
    /// Row-major `[total_frames × n_mel]`.
    pub mel: Vec<f64>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn mel_row(&self, frame: usize) -> &[f64] {
        &self.mel[frame * self.n_mel..(frame + 1) * self.n_mel]
    }

    pub fn validate(&self, n_phonemes: usize) -> Result<()> {
        let n = self.phonemes.len();
        if n == 0 {
            return Err(Error::Input(format!("utterance {} has no phonemes", self.id)));
        }
        if self.durations.len() != n || self.pitch.len() != n || self.energy.len() != n {
            return Err(Error::Input(format!("utterance {}: per-phoneme sequences disagree in length", self.id)));
        }
        if let Some(p) = self.phonemes.iter().find(|&&p| p >= n_phonemes) {
            return Err(Error::Input(format!("utterance {}: phoneme id {p} out of range {n_phonemes}", self.id)));
        }
        if self.durations.contains(&0) {
            return Err(Error::Input(format!("utterance {}: zero duration", self.id)));
        }
        if self.mel.len() != self.n_frames() * self.n_mel {
            return Err(Error::Input(format!(
                "utterance {}: mel has {} values, expected {}x{}",
                self.id,
                self.mel.len(),
                self.n_frames(),
                self.n_mel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Latent parameters are `None` for externally supplied features.
    pub speakers: BTreeMap<u32, Option<SpeakerParams>>,
    pub utterances: Vec<Utterance>,
    pub split: Split,
    pub global_seed: u64,
    pub config: CorpusConfig,
}

impl Corpus {
    pub fn speaker_ids(&self) -> Vec<u32> {
        self.speakers.keys().copied().collect()
    }

    pub fn is_synthetic(&self) -> bool {
        self.speakers.values().all(Option::is_some)
    }

    /// Indices into `utterances`, grouped per speaker in corpus order.
    pub fn by_speaker(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = self.speakers.keys().map(|&k| (k, Vec::new())).collect();
        for (i, u) in self.utterances.iter().enumerate() {
            map.entry(u.speaker_id).or_default().push(i);
        }
        map
    }

    pub fn utterance_by_id(&self, id: u32) -> Option<&Utterance> {
        // ids are assigned densely by the generator; fall back to a scan for external data
        match self.utterances.get(id as usize) {
            Some(u) if u.id == id => Some(u),
            _ => self.utterances.iter().find(|u| u.id == id),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for u in &self.utterances {
            if !self.speakers.contains_key(&u.speaker_id) {
                return Err(Error::Input(format!("utterance {} references unknown speaker {}", u.id, u.speaker_id)));
            }
            u.validate(self.config.n_phonemes)?;
        }
        Ok(())
    }
}

/// Unit-norm per-phoneme spectral templates. Components have magnitude
/// bounded away from zero, which keeps the embedder's per-channel ratios
/// well conditioned.
#[derive(Clone, Debug)]
pub struct PhonemeTemplates {
    n_mel: usize,
    data: Vec<f64>,
}

impl PhonemeTemplates {
    pub fn new(config: &CorpusConfig) -> Self {
        let mut data = Vec::with_capacity(config.n_phonemes * config.n_mel);
        for p in 0..config.n_phonemes {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.template_seed, p as u64));
            let raw: Vec<f64> = (0..config.n_mel)
                .map(|_| {
                    let mag: f64 = rng.random_range(0.5..1.0);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(raw.iter().map(|x| x / norm));
        }
        Self { n_mel: config.n_mel, data }
    }

    pub fn get(&self, phoneme: usize) -> &[f64] {
        &self.data[phoneme * self.n_mel..(phoneme + 1) * self.n_mel]
    }
}

pub fn base_duration(p: usize) -> usize {
    2 + p % 3
}

pub fn base_pitch(p: usize) -> f64 {
    60.0 + 2.0 * (p % 7) as f64
}

pub fn energy_profile(p: usize) -> f64 {
    1.0 + 0.1 * (p % 2) as f64
}

pub const PITCH_MEL_COUPLING: f64 = 0.01;

/// Frame count for a phoneme at a given speaking rate; ties round away from
/// zero and the result is floored at one frame.
pub fn quantize_duration(p: usize, duration_scale: f64) -> usize {
    ((base_duration(p) as f64 * duration_scale).round() as i64).max(1) as usize
}

pub fn make_speaker(speaker_id: u32, seed: u64, config: &CorpusConfig) -> Result<SpeakerParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_dur: f64 = rng.random_range(0.6f64.ln()..1.6f64.ln());
    let pitch_offset = rng.random_range(-4.0..4.0);
    let energy_scale = rng.random_range(0.5..2.0);
    let timbre = (0..config.n_mel).map(|_| rng.random_range(-0.5..0.5)).collect();
    Ok(SpeakerParams { speaker_id, duration_scale: log_dur.exp(), pitch_offset, energy_scale, timbre })
}

pub fn render_utterance(
    id: u32,
    spk: &SpeakerParams,
    phonemes: &[usize],
    noise_seed: u64,
    config: &CorpusConfig,
    templates: &PhonemeTemplates,
) -> Result<Utterance> {
    if phonemes.is_empty() {
        return Err(Error::Input("cannot render an empty phoneme sequence".into()));
    }
    if let Some(p) = phonemes.iter().find(|&&p| p >= config.n_phonemes) {
        return Err(Error::Input(format!("phoneme id {p} out of range {}", config.n_phonemes)));
    }
    if spk.timbre.len() != config.n_mel {
        return Err(Error::Input(format!("timbre has {} channels, expected {}", spk.timbre.len(), config.n_mel)));
    }
    let c = config.n_mel;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let durations: Vec<usize> = phonemes.iter().map(|&p| quantize_duration(p, spk.duration_scale)).collect();
    let pitch: Vec<f64> = phonemes.iter().map(|&p| base_pitch(p) + spk.pitch_offset).collect();
    let energy: Vec<f64> = phonemes.iter().map(|&p| spk.energy_scale * energy_profile(p)).collect();
    let mut mel = Vec::with_capacity(durations.iter().sum::<usize>() * c);
    for (i, &p) in phonemes.iter().enumerate() {
        let t = templates.get(p);
        for _ in 0..durations[i] {
            for ch in 0..c {
                let mut v = energy[i] * t[ch] * (1.0 + spk.timbre[ch]);
                if ch == 0 {
                    v += PITCH_MEL_COUPLING * pitch[i];
                }
                if config.noise_std > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    v += config.noise_std * z;
                }
                mel.push(v);
            }
        }
    }
    Ok(Utterance { id, speaker_id: spk.speaker_id, phonemes: phonemes.to_vec(), durations, pitch, energy, n_mel: c, mel })
}

/// Synthetic speaker ids are `seed·10000 + index`, so corpora generated with
/// different seeds never share ids.
pub fn synthetic_speaker_id(seed: u64, index: usize) -> u32 {
    (seed % 400_000) as u32 * 10_000 + index as u32
}

pub fn generate_corpus(
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
    split: Split,
    config: &CorpusConfig,
) -> Result<Corpus> {
    config.validate()?;
    if utts_per_speaker < 2 * config.k_shot.max(1) {
        return Err(Error::Config(format!(
            "utts_per_speaker = {utts_per_speaker} is below 2K = {}",
            2 * config.k_shot.max(1)
        )));
    }
    if n_speakers == 0 {
        return Err(Error::Config("n_speakers must be positive".into()));
    }
    let templates = PhonemeTemplates::new(config);
    let mut speakers = BTreeMap::new();
    let mut utterances = Vec::with_capacity(n_speakers * utts_per_speaker);
    for s in 0..n_speakers {
        let spk_seed = mix_seed(seed, s as u64);
        let spk = make_speaker(synthetic_speaker_id(seed, s), spk_seed, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spk_seed, 0xC0_0A05));
        for _ in 0..utts_per_speaker {
            let len = rng.random_range(config.min_len..=config.max_len);
            let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.n_phonemes)).collect();
            let noise_seed = rng.random::<u64>();
            let id = utterances.len() as u32;
            utterances.push(render_utterance(id, &spk, &phonemes, noise_seed, config, &templates)?);
        }
        speakers.insert(spk.speaker_id, Some(spk));
    }
    Ok(Corpus { speakers, utterances, split, global_seed: seed, config: config.clone() })
}

/// Fixed-dimension utterance embedding `[duration, pitch, energy, timbre…]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Minimal view the embedder needs; real and synthesized utterances both
/// provide it.
pub struct FeatureView<'a> {
    pub phonemes: &'a [usize],
    pub durations: &'a [usize],
    pub pitch: &'a [f64],
    pub energy: &'a [f64],
    pub n_mel: usize,
    pub mel: &'a [f64],
}

impl<'a> From<&'a Utterance> for FeatureView<'a> {
    fn from(u: &'a Utterance) -> Self {
        FeatureView {
            phonemes: &u.phonemes,
            durations: &u.durations,
            pitch: &u.pitch,
            energy: &u.energy,
            n_mel: u.n_mel,
            mel: &u.mel,
        }
    }
}

const RATIO_GUARD: f64 = 1e-9;

/// Pitch offsets span ±4; this maps them onto the ±0.5 range the other
/// coordinates occupy.
pub const PITCH_EMBED_SCALE: f64 = 0.125;

/// The neutral speaker sits at the origin of the embedding space.
fn centre_prosody(duration_scale: f64, pitch_offset: f64, energy_scale: f64) -> [f64; 3] {
    [duration_scale - 1.0, pitch_offset * PITCH_EMBED_SCALE, energy_scale - 1.0]
}

/// The embedding a speaker's utterances map to when durations need no
/// rounding and there is no noise.
pub fn latent_embedding(spk: &SpeakerParams) -> Embedding {
    let mut v = centre_prosody(spk.duration_scale, spk.pitch_offset, spk.energy_scale).to_vec();
    v.extend_from_slice(&spk.timbre);
    Embedding(v)
}

impl Embedding {
    /// Inverse of [`latent_embedding`]: `(duration_scale, pitch_offset, energy_scale, timbre)`.
    pub fn to_latents(&self) -> (f64, f64, f64, Vec<f64>) {
        let v = &self.0;
        (v[0] + 1.0, v[1] / PITCH_EMBED_SCALE, v[2] + 1.0, v[3..].to_vec())
    }
}

/// Analytic speaker embedding: undoes the rendering recipe per phoneme and
/// averages the recovered latent attributes. Coordinates are
/// `[duration_scale − 1, pitch_offset·PITCH_EMBED_SCALE, energy_scale − 1, timbre…]`.
pub fn oracle_embed(u: FeatureView<'_>, templates: &PhonemeTemplates) -> Result<Embedding> {
    let n = u.phonemes.len();
    if n == 0 || u.durations.len() != n || u.pitch.len() != n || u.energy.len() != n {
        return Err(Error::Input("oracle_embed needs aligned, non-empty per-phoneme features".into()));
    }
    let frames: usize = u.durations.iter().sum();
    if u.mel.len() != frames * u.n_mel {
        return Err(Error::Input(format!("mel has {} values for {frames} frames", u.mel.len())));
    }
    let inv_n = 1.0 / n as f64;
    let dur = u.phonemes.iter().zip(u.durations).map(|(&p, &d)| d as f64 / base_duration(p) as f64).sum::<f64>() * inv_n;
    let pitch = u.phonemes.iter().zip(u.pitch).map(|(&p, &f)| f - base_pitch(p)).sum::<f64>() * inv_n;
    let energy = u.phonemes.iter().zip(u.energy).map(|(&p, &e)| e / energy_profile(p)).sum::<f64>() * inv_n;

    let c = u.n_mel;
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    let mut frame = 0;
    for (i, &p) in u.phonemes.iter().enumerate() {
        let t = templates.get(p);
        for _ in 0..u.durations[i] {
            let row = &u.mel[frame * c..(frame + 1) * c];
            for ch in 0..c {
                let denom = u.energy[i] * t[ch];
                if denom.abs() < RATIO_GUARD {
                    continue;
                }
                let mut v = row[ch];
                if ch == 0 {
                    v -= PITCH_MEL_COUPLING * u.pitch[i];
                }
                sums[ch] += v / denom - 1.0;
                counts[ch] += 1;
            }
            frame += 1;
        }
    }
    let mut values = Vec::with_capacity(3 + c);
    values.extend(centre_prosody(dur, pitch, energy));
    values.extend(sums.iter().zip(&counts).map(|(&s, &k)| if k == 0 { 0.0 } else { s / k as f64 }));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite oracle embedding".into()));
    }
    Ok(Embedding(values))
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Serialize, Deserialize)]
struct SpeakerRecord {
    id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pitch_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timbre: Option<Vec<f64>>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: u32,
    speaker_id: u32,
    phonemes: Vec<usize>,
    durations: Vec<usize>,
    pitch: Vec<f64>,
    energy: Vec<f64>,
    mel: Vec<f64>,
    mel_shape: [usize; 2],
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    format_version: u32,
    global_seed: u64,
    split: Split,
    n_speakers: usize,
    n_utterances: usize,
    config: CorpusConfig,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

fn warn_extra(path: &Path, line: usize, extra: &BTreeMap<String, serde_json::Value>) {
    for key in extra.keys() {
        log::warn!("{}:{line}: ignoring unknown field `{key}`", path.display());
    }
}

pub fn save_corpus(c: &Corpus, dir: &Path) -> Result<()> {
    let mut speakers = Vec::new();
    for (&id, p) in &c.speakers {
        let rec = SpeakerRecord {
            id,
            duration_scale: p.as_ref().map(|p| p.duration_scale),
            pitch_offset: p.as_ref().map(|p| p.pitch_offset),
            energy_scale: p.as_ref().map(|p| p.energy_scale),
            timbre: p.as_ref().map(|p| p.timbre.clone()),
            extra: BTreeMap::new(),
        };
        speakers.extend(to_precise_json(&rec)?);
        speakers.push(b'\n');
    }
    let mut utts = Vec::new();
    for u in &c.utterances {
        let rec = UtteranceRecord {
            id: u.id,
            speaker_id: u.speaker_id,
            phonemes: u.phonemes.clone(),
            durations: u.durations.clone(),
            pitch: u.pitch.clone(),
            energy: u.energy.clone(),
            mel: u.mel.clone(),
            mel_shape: [u.n_frames(), u.n_mel],
            extra: BTreeMap::new(),
        };
        utts.extend(to_precise_json(&rec)?);
        utts.push(b'\n');
    }
    let meta = MetaRecord {
        format_version: FORMAT_VERSION,
        global_seed: c.global_seed,
        split: c.split,
        n_speakers: c.speakers.len(),
        n_utterances: c.utterances.len(),
        config: c.config.clone(),
        extra: BTreeMap::new(),
    };
    let mut meta_bytes = to_precise_json(&meta)?;
    meta_bytes.push(b'\n');
    write_atomic(&dir.join("speakers.jsonl"), &speakers)?;
    write_atomic(&dir.join("utterances.jsonl"), &utts)?;
    // meta last: a directory without meta.json is not a corpus
    write_atomic(&dir.join("meta.json"), &meta_bytes)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    let meta: MetaRecord =
        serde_json::from_str(&read_to_string(&meta_path)?).map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    warn_extra(&meta_path, 1, &meta.extra);
    if meta.format_version != FORMAT_VERSION {
        return Err(parse_err(&meta_path, 1, format!("unsupported format_version {}", meta.format_version)));
    }

    let spk_path = dir.join("speakers.jsonl");
    let mut speakers = BTreeMap::new();
    for (i, line) in read_to_string(&spk_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpeakerRecord = serde_json::from_str(line).map_err(|e| parse_err(&spk_path, i + 1, e.to_string()))?;
        warn_extra(&spk_path, i + 1, &rec.extra);
        let latent = match (rec.duration_scale, rec.pitch_offset, rec.energy_scale, rec.timbre) {
            (Some(d), Some(p), Some(e), Some(t)) => {
                if t.len() != meta.config.n_mel {
                    return Err(parse_err(&spk_path, i + 1, format!("timbre has {} channels", t.len())));
                }
                Some(SpeakerParams { speaker_id: rec.id, duration_scale: d, pitch_offset: p, energy_scale: e, timbre: t })
            }
            (None, None, None, None) => None,
            _ => return Err(parse_err(&spk_path, i + 1, "latent fields must be all present or all absent")),
        };
        if speakers.insert(rec.id, latent).is_some() {
            return Err(parse_err(&spk_path, i + 1, format!("duplicate speaker id {}", rec.id)));
        }
    }
    if speakers.len() != meta.n_speakers {
        return Err(parse_err(&spk_path, 0, format!("found {} speakers, meta.json declares {}", speakers.len(), meta.n_speakers)));
    }

    let utt_path = dir.join("utterances.jsonl");
    let mut utterances = Vec::with_capacity(meta.n_utterances);
    for (i, line) in read_to_string(&utt_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(line).map_err(|e| parse_err(&utt_path, i + 1, e.to_string()))?;
        warn_extra(&utt_path, i + 1, &rec.extra);
        let [frames, n_mel] = rec.mel_shape;
        if n_mel != meta.config.n_mel || frames * n_mel != rec.mel.len() {
            return Err(parse_err(&utt_path, i + 1, format!("mel shape {frames}x{n_mel} does not match payload")));
        }
        let u = Utterance {
            id: rec.id,
            speaker_id: rec.speaker_id,
            phonemes: rec.phonemes,
            durations: rec.durations,
            pitch: rec.pitch,
            energy: rec.energy,
            n_mel,
            mel: rec.mel,
        };
        u.validate(meta.config.n_phonemes).map_err(|e| parse_err(&utt_path, i + 1, e.to_string()))?;
        if !speakers.contains_key(&u.speaker_id) {
            return Err(parse_err(&utt_path, i + 1, format!("unknown speaker {}", u.speaker_id)));
        }
        utterances.push(u);
    }
    if utterances.len() != meta.n_utterances {
        return Err(parse_err(
            &utt_path,
            0,
            format!("found {} utterances, meta.json declares {}", utterances.len(), meta.n_utterances),
        ));
    }
    Ok(Corpus { speakers, utterances, split: meta.split, global_seed: meta.global_seed, config: meta.config })
}

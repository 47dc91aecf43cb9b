//! K-shot meta-tasks: one speaker, a support set and a disjoint query set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::io::{mix_seed, read_to_string, sha256_hex, write_atomic};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEpisode {
    pub task_id: usize,
    pub speaker_id: u32,
    /// Utterance ids.
    pub support: Vec<u32>,
    pub query: Vec<u32>,
    pub k: usize,
    pub q: usize,
    /// Seed of the generator that drew this episode.
    pub seed: u64,
}

impl TaskEpisode {
    /// Check the episode against a corpus: references exist, share the
    /// speaker, and support and query are disjoint.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.support.len() != self.k || self.query.len() != self.q {
            return Err(Error::Input(format!("task {}: K/Q do not match set sizes", self.task_id)));
        }
        let s: BTreeSet<u32> = self.support.iter().copied().collect();
        if s.len() != self.k || self.query.iter().any(|q| s.contains(q)) {
            return Err(Error::Input(format!("task {}: support and query overlap", self.task_id)));
        }
        for id in self.support.iter().chain(&self.query) {
            let u = corpus
                .utterance_by_id(*id)
                .ok_or_else(|| Error::Input(format!("task {}: unknown utterance {id}", self.task_id)))?;
            if u.speaker_id != self.speaker_id {
                return Err(Error::Input(format!("task {}: utterance {id} belongs to speaker {}", self.task_id, u.speaker_id)));
            }
        }
        Ok(())
    }

    pub fn support_utts<'a>(&self, corpus: &'a Corpus) -> Result<Vec<&'a Utterance>> {
        resolve(corpus, &self.support)
    }

    pub fn query_utts<'a>(&self, corpus: &'a Corpus) -> Result<Vec<&'a Utterance>> {
        resolve(corpus, &self.query)
    }
}

fn resolve<'a>(corpus: &'a Corpus, ids: &[u32]) -> Result<Vec<&'a Utterance>> {
    ids.iter()
        .map(|&id| corpus.utterance_by_id(id).ok_or_else(|| Error::Input(format!("unknown utterance {id}"))))
        .collect()
}

/// Per-speaker utterance pools for repeated sampling.
pub struct EpisodeSampler {
    speakers: Vec<u32>,
    pools: BTreeMap<u32, Vec<u32>>,
}

impl EpisodeSampler {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let pools: BTreeMap<u32, Vec<u32>> = corpus
            .by_speaker()
            .into_iter()
            .map(|(spk, idx)| (spk, idx.into_iter().map(|i| corpus.utterances[i].id).collect()))
            .collect();
        if pools.is_empty() {
            return Err(Error::Input("corpus has no speakers".into()));
        }
        Ok(Self { speakers: pools.keys().copied().collect(), pools })
    }

    pub fn speakers(&self) -> &[u32] {
        &self.speakers
    }

    /// Draw a uniformly random speaker, then `k + q` of its utterances
    /// without replacement; the first `k` form the support set.
    pub fn sample<R: Rng>(&self, k: usize, q: usize, rng: &mut R) -> Result<TaskEpisode> {
        let spk = self.speakers[rng.random_range(0..self.speakers.len())];
        let seed = rng.random::<u64>();
        self.draw(spk, k, q, seed, 0)
    }

    /// Deterministic draw for one speaker from `seed`.
    pub fn draw(&self, speaker: u32, k: usize, q: usize, seed: u64, task_id: usize) -> Result<TaskEpisode> {
        if k == 0 {
            return Err(Error::Input("K must be positive".into()));
        }
        let pool = self.pools.get(&speaker).ok_or(Error::UnknownSpeaker(speaker))?;
        if pool.len() < k + q {
            return Err(Error::Sampling { speaker, available: pool.len(), needed: k + q });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<u32> = index::sample(&mut rng, pool.len(), k + q).into_iter().map(|i| pool[i]).collect();
        Ok(TaskEpisode {
            task_id,
            speaker_id: speaker,
            support: picks[..k].to_vec(),
            query: picks[k..].to_vec(),
            k,
            q,
            seed,
        })
    }
}

/// One training episode; see [`EpisodeSampler::sample`].
pub fn sample_episode<R: Rng>(corpus: &Corpus, k: usize, q: usize, rng: &mut R) -> Result<TaskEpisode> {
    EpisodeSampler::new(corpus)?.sample(k, q, rng)
}

/// `tasks_per_speaker` evaluation episodes per speaker with a single query
/// item each. Speakers are visited in id order; each episode's seed derives
/// from `(seed, speaker, index)`.
pub fn build_eval_tasks(corpus: &Corpus, tasks_per_speaker: usize, k: usize, seed: u64) -> Result<Vec<TaskEpisode>> {
    let sampler = EpisodeSampler::new(corpus)?;
    for (&spk, pool) in &sampler.pools {
        if pool.len() < k + 1 {
            return Err(Error::Sampling { speaker: spk, available: pool.len(), needed: k + 1 });
        }
    }
    let mut tasks = Vec::with_capacity(sampler.speakers.len() * tasks_per_speaker);
    for &spk in &sampler.speakers {
        for t in 0..tasks_per_speaker {
            let s = mix_seed(mix_seed(seed, spk as u64), t as u64);
            let id = tasks.len();
            tasks.push(sampler.draw(spk, k, 1, s, id)?);
        }
    }
    Ok(tasks)
}

/// JSON-lines encoding, one episode per line.
pub fn manifest_bytes(tasks: &[TaskEpisode]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in tasks {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::Input(format!("manifest: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn manifest_hash(tasks: &[TaskEpisode]) -> Result<String> {
    Ok(sha256_hex(&manifest_bytes(tasks)?))
}

/// Write the manifest and return its hash.
pub fn write_manifest(path: &Path, tasks: &[TaskEpisode]) -> Result<String> {
    let bytes = manifest_bytes(tasks)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Read a manifest and return it with the hash of its bytes.
pub fn read_manifest(path: &Path) -> Result<(Vec<TaskEpisode>, String)> {
    let text = read_to_string(path)?;
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskEpisode = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        tasks.push(t);
    }
    Ok((tasks, sha256_hex(text.as_bytes())))
}

//! Evaluation surrogates: embedding similarity, similarity matrices,
//! verification EER with DET points, and real-vs-synthetic detection AUC.
//!
//! Score convention: a trial is accepted when its score is strictly above
//! the threshold, so a score equal to the threshold is a rejection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloning::TaskResult;
use crate::corpus::{oracle_embed, Corpus, PhonemeTemplates};
use crate::error::{Error, Result};
use crate::io::mix_seed;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Input("cosine similarity of a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

pub fn speaker_centroid(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| Error::Input("centroid of no embeddings".into()))?;
    let mut c = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != c.len() {
            return Err(Error::Input("embeddings differ in length".into()));
        }
        c.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / embeddings.len() as f64;
    c.iter_mut().for_each(|a| *a *= inv);
    Ok(c)
}

pub fn similarity_to_target(synth: &[f64], target_centroid: &[f64]) -> Result<f64> {
    cosine_similarity(synth, target_centroid)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Metric("mean of an empty set".into()));
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Ok((m, v.sqrt()))
}

/// Entry `(i, j)` is the similarity of synthesized representation `i` to real representation `j`.
pub fn similarity_matrix(synth_reps: &[Vec<f64>], real_reps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if synth_reps.len() != real_reps.len() {
        return Err(Error::Input("synthesized and real speaker sets differ".into()));
    }
    synth_reps.iter().map(|s| real_reps.iter().map(|r| cosine_similarity(s, r)).collect()).collect()
}

/// Fraction of rows whose maximum sits on the diagonal; ties go against the diagonal.
pub fn diagonal_argmax_rate(m: &[Vec<f64>]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let hits = m
        .iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == *i || v < row[*i]))
        .count();
    hits as f64 / m.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreContext {
    Verification,
    Detection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<(f64, Label)>,
    pub context: ScoreContext,
}

impl ScoreSet {
    pub fn new(context: ScoreContext) -> Self {
        Self { scores: Vec::new(), context }
    }

    pub fn push(&mut self, score: f64, label: Label) {
        self.scores.push((score, label));
    }

    pub fn counts(&self) -> (usize, usize) {
        let p = self.scores.iter().filter(|s| s.1 == Label::Positive).count();
        (p, self.scores.len() - p)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(Error::Metric(format!("score set needs both labels ({p} positive, {n} negative)")));
        }
        if self.scores.iter().any(|s| !s.0.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        Ok((p, n))
    }
}

/// One operating point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    /// `-inf` for the accept-everything point.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Sweep over every distinct score plus an accept-all threshold, ascending.
pub fn det_curve(s: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (p, n) = s.check()?;
    let mut sorted = s.scores.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![DetPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 }];
    let (mut neg_at_or_below, mut pos_at_or_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Positive => pos_at_or_below += 1,
                Label::Negative => neg_at_or_below += 1,
            }
            i += 1;
        }
        out.push(DetPoint { threshold: t, far: (n - neg_at_or_below) as f64 / n as f64, frr: pos_at_or_below as f64 / p as f64 });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate: the point where the lower convex hull of the DET
/// points meets FAR = FRR, by linear interpolation along the hull segment.
/// The threshold is interpolated between the segment's end thresholds.
pub fn compute_eer(s: &ScoreSet) -> Result<Eer> {
    let pts = det_curve(s)?;
    // far decreases and frr increases along the sweep; build the lower hull
    // in (far ascending) order
    let mut v: Vec<DetPoint> = pts.into_iter().rev().collect();
    v.dedup_by(|b, a| a.far == b.far && a.frr == b.frr);
    let mut hull: Vec<DetPoint> = Vec::new();
    for p in v {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.far - a.far) * (p.frr - a.frr) - (b.frr - a.frr) * (p.far - a.far);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.frr - a.far, b.frr - b.far);
        if da >= 0.0 && db <= 0.0 {
            if da == db {
                return Ok(Eer { eer: a.far, threshold: finite_threshold(a.threshold, b.threshold) });
            }
            let t = da / (da - db);
            let eer = a.far + t * (b.far - a.far);
            let (ta, tb) = (a.threshold, b.threshold);
            let threshold = if ta.is_finite() && tb.is_finite() { ta + t * (tb - ta) } else { finite_threshold(ta, tb) };
            return Ok(Eer { eer, threshold });
        }
    }
    Err(Error::Metric("DET hull never crosses FAR = FRR".into()))
}

fn finite_threshold(a: f64, b: f64) -> f64 {
    if a.is_finite() {
        a
    } else {
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn roc_curve(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    Ok(det_curve(s)?.into_iter().map(|d| RocPoint { threshold: d.threshold, fpr: d.far, tpr: 1.0 - d.frr }).collect())
}

/// AUC as an exact fraction `twice_wins / (2·P·N)`, where a win counts 2
/// and a tie counts 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AucCounts {
    pub twice_wins: u64,
    pub denom: u64,
}

impl AucCounts {
    pub fn value(&self) -> f64 {
        self.twice_wins as f64 / self.denom as f64
    }
}

/// Rank-statistic AUC in O((P+N) log(P+N)).
pub fn roc_auc_counts(s: &ScoreSet) -> Result<AucCounts> {
    let (p, n) = s.check()?;
    let mut sorted = s.scores.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut neg_below = 0u64;
    let mut twice = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Positive => gp += 1,
                Label::Negative => gn += 1,
            }
            i += 1;
        }
        twice += gp * (2 * neg_below + gn);
        neg_below += gn;
    }
    Ok(AucCounts { twice_wins: twice, denom: 2 * p as u64 * n as u64 })
}

pub fn roc_auc(s: &ScoreSet) -> Result<f64> {
    Ok(roc_auc_counts(s)?.value())
}

/// A synthesized (or real) utterance embedding tagged with its speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub speaker_id: u32,
    pub utterance_id: u32,
    pub embedding: Vec<f64>,
}

/// Oracle embedding of every real utterance, grouped per speaker.
pub fn real_embeddings(corpus: &Corpus) -> Result<BTreeMap<u32, Vec<SpeakerEmbedding>>> {
    let templates = PhonemeTemplates::new(&corpus.config);
    let mut out: BTreeMap<u32, Vec<SpeakerEmbedding>> = BTreeMap::new();
    for u in &corpus.utterances {
        let e = oracle_embed(u.into(), &templates)?;
        out.entry(u.speaker_id).or_default().push(SpeakerEmbedding { speaker_id: u.speaker_id, utterance_id: u.id, embedding: e.0 });
    }
    Ok(out)
}

/// Pairs each synthesized embedding with one random real enrollment. With
/// probability `same_ratio` the enrollment speaker is the target itself,
/// otherwise one of the other speakers uniformly.
pub fn verification_scores(
    synth: &[SpeakerEmbedding],
    real: &BTreeMap<u32, Vec<SpeakerEmbedding>>,
    same_ratio: f64,
    pairing_seed: u64,
) -> Result<ScoreSet> {
    if !(0.0..=1.0).contains(&same_ratio) {
        return Err(Error::Config(format!("same-speaker ratio {same_ratio} outside [0, 1]")));
    }
    let speakers: Vec<u32> = real.keys().copied().collect();
    if let Some((s, _)) = real.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Metric(format!("speaker {s} has no real utterances to pair with")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(pairing_seed, 0x7E21));
    let mut set = ScoreSet::new(ScoreContext::Verification);
    for s in synth {
        if !real.contains_key(&s.speaker_id) {
            return Err(Error::Metric(format!("speaker {} has no real utterances to pair with", s.speaker_id)));
        }
        let same = speakers.len() == 1 || rng.random::<f64>() < same_ratio;
        let j = if same {
            s.speaker_id
        } else {
            let others: Vec<u32> = speakers.iter().copied().filter(|&x| x != s.speaker_id).collect();
            others[rng.random_range(0..others.len())]
        };
        let pool = &real[&j];
        let e = &pool[rng.random_range(0..pool.len())];
        let label = if j == s.speaker_id { Label::Positive } else { Label::Negative };
        set.push(cosine_similarity(&s.embedding, &e.embedding)?, label);
    }
    Ok(set)
}

/// Real utterances (positive) and synthesized ones (negative), each scored
/// against a random same-speaker real enrollment; a real item never
/// enrolls against itself.
pub fn detection_scores(
    synth: &[SpeakerEmbedding],
    real: &BTreeMap<u32, Vec<SpeakerEmbedding>>,
    pairing_seed: u64,
) -> Result<ScoreSet> {
    if let Some((s, v)) = real.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Metric(format!("speaker {s} has {} real utterances; detection needs 2", v.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(pairing_seed, 0xDE7E));
    let mut set = ScoreSet::new(ScoreContext::Detection);
    for s in synth {
        let pool = real
            .get(&s.speaker_id)
            .ok_or_else(|| Error::Metric(format!("speaker {} has no real utterances to pair with", s.speaker_id)))?;
        let e = &pool[rng.random_range(0..pool.len())];
        set.push(cosine_similarity(&s.embedding, &e.embedding)?, Label::Negative);
    }
    for pool in real.values() {
        for (i, r) in pool.iter().enumerate() {
            let mut k = rng.random_range(0..pool.len() - 1);
            if k >= i {
                k += 1;
            }
            set.push(cosine_similarity(&r.embedding, &pool[k].embedding)?, Label::Positive);
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkMetrics {
    pub n_outputs: usize,
    pub similarity_mean: f64,
    pub similarity_std: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub roc_auc: f64,
    /// Fraction of speakers whose similarity-matrix row peaks on the diagonal.
    pub diagonal_rate: f64,
    pub support_loss: Option<f64>,
    pub similarity_matrix: Vec<Vec<f64>>,
    pub det: Vec<(f64, f64)>,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub approach: String,
    pub mask: String,
    pub manifest_hash: String,
    pub n_tasks: usize,
    /// Row/column order of every similarity matrix.
    pub speakers: Vec<u32>,
    pub marks: BTreeMap<usize, MarkMetrics>,
    pub embedder: String,
    pub config: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub same_ratio: f64,
    pub pairing_seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { same_ratio: 0.5, pairing_seed: 0 }
    }
}

/// Oracle embeddings of the synthesized outputs at each mark.
pub fn synth_embeddings(results: &[TaskResult], templates: &PhonemeTemplates) -> Result<BTreeMap<usize, Vec<SpeakerEmbedding>>> {
    let mut out: BTreeMap<usize, Vec<SpeakerEmbedding>> = BTreeMap::new();
    for r in results {
        for m in &r.marks {
            for o in &m.outputs {
                let e = oracle_embed(o.into(), templates)?;
                out.entry(m.mark).or_default().push(SpeakerEmbedding { speaker_id: r.speaker_id, utterance_id: o.query_id, embedding: e.0 });
            }
        }
    }
    Ok(out)
}

/// Aggregate a sweep over the test corpus into per-mark metrics.
pub fn build_report(results: &[TaskResult], corpus: &Corpus, cfg: &ReportConfig, echo: serde_json::Value) -> Result<MetricReport> {
    let first = results.first().ok_or_else(|| Error::Metric("no task results".into()))?;
    if let Some(r) = results.iter().find(|r| r.manifest_hash != first.manifest_hash) {
        return Err(Error::Metric(format!("task {} was run on manifest {} but task {} on {}", r.task_id, r.manifest_hash, first.task_id, first.manifest_hash)));
    }
    let marks: Vec<usize> = first.marks.iter().map(|m| m.mark).collect();
    if marks.is_empty() {
        return Err(Error::Metric("task results carry no step marks".into()));
    }
    if let Some(r) = results.iter().find(|r| r.marks.iter().map(|m| m.mark).ne(marks.iter().copied()) || r.marks.iter().any(|m| m.outputs.is_empty())) {
        return Err(Error::Metric(format!("task {} has a different or empty mark set", r.task_id)));
    }
    let real = real_embeddings(corpus)?;
    let speakers: Vec<u32> = real.keys().copied().collect();
    let centroids: BTreeMap<u32, Vec<f64>> = real
        .iter()
        .map(|(&s, v)| Ok((s, speaker_centroid(&v.iter().map(|e| e.embedding.clone()).collect::<Vec<_>>())?)))
        .collect::<Result<_>>()?;
    let templates = PhonemeTemplates::new(&corpus.config);
    let synth = synth_embeddings(results, &templates)?;

    let mut out = BTreeMap::new();
    for &mark in &marks {
        let embs = &synth[&mark];
        let sims = embs
            .iter()
            .map(|e| {
                let c = centroids.get(&e.speaker_id).ok_or(Error::UnknownSpeaker(e.speaker_id))?;
                similarity_to_target(&e.embedding, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let (similarity_mean, similarity_std) = mean_std(&sims)?;

        let mut per_spk: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for e in embs {
            per_spk.entry(e.speaker_id).or_default().push(e.embedding.clone());
        }
        let rows: Vec<u32> = speakers.iter().copied().filter(|s| per_spk.contains_key(s)).collect();
        let synth_reps = rows.iter().map(|s| speaker_centroid(&per_spk[s])).collect::<Result<Vec<_>>>()?;
        let real_reps: Vec<Vec<f64>> = rows.iter().map(|s| centroids[s].clone()).collect();
        let matrix = similarity_matrix(&synth_reps, &real_reps)?;

        let mark_seed = mix_seed(cfg.pairing_seed, mark as u64);
        let ver = verification_scores(embs, &real, cfg.same_ratio, mark_seed)?;
        let eer = compute_eer(&ver)?;
        let det = det_curve(&ver)?;
        let detn = detection_scores(embs, &real, mark_seed)?;
        let auc = roc_auc(&detn)?;
        let roc = roc_curve(&detn)?;

        let losses: Vec<f64> = results
            .iter()
            .filter_map(|r| r.marks.iter().find(|m| m.mark == mark).and_then(|m| m.support_loss).map(|l| l.total))
            .collect();
        out.insert(
            mark,
            MarkMetrics {
                n_outputs: embs.len(),
                similarity_mean,
                similarity_std,
                eer: eer.eer,
                eer_threshold: eer.threshold,
                roc_auc: auc,
                diagonal_rate: diagonal_argmax_rate(&matrix),
                support_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                similarity_matrix: matrix,
                det: det.iter().map(|d| (d.far, d.frr)).collect(),
                roc: roc.iter().map(|r| (r.fpr, r.tpr)).collect(),
            },
        );
    }
    Ok(MetricReport {
        approach: first.approach.clone(),
        mask: first.mask.clone(),
        manifest_hash: first.manifest_hash.clone(),
        n_tasks: results.len(),
        speakers,
        marks: out,
        embedder: "oracle-embedder".into(),
        config: echo,
    })
}

/// Two-column text, one point per line.
pub fn curve_text(points: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (x, y) in points {
        let _ = writeln!(s, "{x:?} {y:?}");
    }
    s
}

pub fn parse_curve_text(text: &str) -> Result<Vec<(f64, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => Ok((x, y)),
                _ => Err(Error::Input(format!("curve line {}: expected two numbers", i + 1))),
            }
        })
        .collect()
}

/// One line per embedding: speaker id, utterance id, then the vector.
pub fn embedding_dump(embs: &[SpeakerEmbedding]) -> String {
    let mut s = String::new();
    for e in embs {
        let _ = write!(s, "{} {}", e.speaker_id, e.utterance_id);
        for v in &e.embedding {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoreSet {
        let mut s = ScoreSet::new(ScoreContext::Verification);
        pos.iter().for_each(|&x| s.push(x, Label::Positive));
        neg.iter().for_each(|&x| s.push(x, Label::Negative));
        s
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn eer_examples() {
        let e = compute_eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap();
        assert_eq!(e.eer, 0.0);
        let e = compute_eer(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap();
        assert!((e.eer - 0.25).abs() < 1e-15, "{e:?}");
        assert!(compute_eer(&set(&[0.5], &[])).is_err());
    }

    #[test]
    fn threshold_equality_rejects() {
        let d = det_curve(&set(&[0.5], &[0.5])).unwrap();
        assert_eq!(d[1], DetPoint { threshold: 0.5, far: 0.0, frr: 1.0 });
    }

    #[test]
    fn auc_examples() {
        let mut s = ScoreSet::new(ScoreContext::Detection);
        s.push(0.9, Label::Positive);
        s.push(0.8, Label::Positive);
        s.push(0.1, Label::Negative);
        assert_eq!(roc_auc(&s).unwrap(), 1.0);
        assert_eq!(roc_auc(&set(&[0.3, 0.7], &[0.3, 0.7])).unwrap(), 0.5);
    }

    #[test]
    fn aggregate_mean() {
        let (m, _) = mean_std(&[0.8, 1.0]).unwrap();
        assert!((m - 0.9).abs() < 1e-15);
    }

    #[test]
    fn curve_text_round_trips() {
        let pts = vec![(0.1, 0.25), (1.0 / 3.0, 2.0)];
        assert_eq!(parse_curve_text(&curve_text(&pts)).unwrap(), pts);
        assert!(parse_curve_text("1 2 3\n").is_err());
    }
}

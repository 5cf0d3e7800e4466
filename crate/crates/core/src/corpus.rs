//! Training-corpus filtering, benchmark curation and quality ranking.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::phonemes::Lexicon;

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub lang: String,
    pub transcript: String,
    pub speaker: String,
    pub duration_s: f64,
    pub char_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_score: Option<f64>,
    /// Path of the feature file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

impl CorpusRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!(
                "record {:?} has duration {}",
                self.id, self.duration_s
            )));
        }
        Ok(())
    }

    pub fn speaking_rate(&self) -> f64 {
        self.char_count as f64 / self.duration_s
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

pub trait QualityScorer: Send + Sync {
    fn score(&self, features: &FeatureSequence) -> f64;
}

pub trait LanguageDetector: Send + Sync {
    fn detect(&self, transcript: &str) -> Option<String>;
}

/// Returns a unit-norm vector.
pub trait SpeakerEmbedder: Send + Sync {
    fn embed(&self, features: &FeatureSequence) -> Array1<f64>;
}

/// Returns `None` when nothing is left after trimming.
pub trait VadTrimmer: Send + Sync {
    fn trim(&self, features: &FeatureSequence) -> Option<FeatureSequence>;
}

/// Mean absolute frame value, clipped to `[0, 1]` and mapped onto `[1, 5]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbsQuality;

impl QualityScorer for MeanAbsQuality {
    fn score(&self, f: &FeatureSequence) -> f64 {
        let m = f.frames().iter().map(|v| v.abs()).sum::<f64>() / f.frames().len() as f64;
        1.0 + 4.0 * m.clamp(0.0, 1.0)
    }
}

/// Picks the lexicon covering the most words; ties and zero coverage give `None`.
#[derive(Debug, Clone)]
pub struct LexiconDetector {
    pub lexica: Vec<(String, Lexicon)>,
}

impl LanguageDetector for LexiconDetector {
    fn detect(&self, transcript: &str) -> Option<String> {
        let scores: Vec<(usize, &str)> = self
            .lexica
            .iter()
            .map(|(c, l)| (l.coverage(transcript), c.as_str()))
            .collect();
        let best = scores.iter().map(|s| s.0).max()?;
        let mut winners = scores.iter().filter(|s| s.0 == best);
        match (best, winners.next(), winners.next()) {
            (0, _, _) | (_, _, Some(_)) => None,
            (_, Some((_, code)), None) => Some(code.to_string()),
            _ => None,
        }
    }
}

/// Normalised `mean frame - reference`: the per-speaker offset estimate when
/// `reference` is the average content frame.
#[derive(Debug, Clone)]
pub struct OffsetEmbedder {
    pub reference: Option<Array1<f64>>,
}

impl SpeakerEmbedder for OffsetEmbedder {
    fn embed(&self, f: &FeatureSequence) -> Array1<f64> {
        let mut v = f.mean_frame();
        if let Some(r) = &self.reference {
            v -= r;
        }
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            v / n
        } else {
            let mut e = Array1::zeros(v.len());
            e[0] = 1.0;
            e
        }
    }
}

/// Strips leading and trailing frames whose RMS is below `threshold`.
#[derive(Debug, Clone, Copy)]
pub struct RmsTrimmer {
    pub threshold: f64,
}

impl Default for RmsTrimmer {
    fn default() -> Self {
        Self { threshold: 0.005 }
    }
}

impl VadTrimmer for RmsTrimmer {
    fn trim(&self, f: &FeatureSequence) -> Option<FeatureSequence> {
        let voiced = |u: usize| {
            let r = f.frame(u);
            (r.dot(&r) / r.len() as f64).sqrt() >= self.threshold
        };
        let start = (0..f.len()).find(|&u| voiced(u))?;
        let end = (0..f.len()).rev().find(|&u| voiced(u))? + 1;
        f.slice(start, end).ok()
    }
}

pub struct ScorerSuite {
    pub quality: Box<dyn QualityScorer>,
    pub language: Box<dyn LanguageDetector>,
    pub embedder: Box<dyn SpeakerEmbedder>,
    pub vad: Box<dyn VadTrimmer>,
}

impl ScorerSuite {
    pub fn toy(lexica: Vec<(String, Lexicon)>, reference: Option<Array1<f64>>) -> Self {
        Self {
            quality: Box::new(MeanAbsQuality),
            language: Box::new(LexiconDetector { lexica }),
            embedder: Box::new(OffsetEmbedder { reference }),
            vad: Box::new(RmsTrimmer::default()),
        }
    }
}

/// Speaking-rate rule for one language.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RatePolicy {
    Fixed { min_cps: f64, max_cps: f64 },
    Iqr,
}

impl Default for RatePolicy {
    fn default() -> Self {
        RatePolicy::Fixed {
            min_cps: 5.0,
            max_cps: 20.0,
        }
    }
}

pub type LangPolicy = BTreeMap<String, RatePolicy>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Transcripts seen more than this many times are all removed.
    pub dedup_limit: usize,
    /// `None` disables the quality stage.
    pub quality_threshold: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_duration_s: 0.5,
            max_duration_s: 30.0,
            dedup_limit: 20,
            quality_threshold: Some(1.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Duration,
    SpeakingRate,
    Language,
    Duplicate,
    Quality,
    VadDuration,
    Rms,
    Similarity,
}

impl Reason {
    pub const TRAINING: [Reason; 5] = [
        Reason::Duration,
        Reason::SpeakingRate,
        Reason::Language,
        Reason::Duplicate,
        Reason::Quality,
    ];
    pub const BENCHMARK: [Reason; 4] = [
        Reason::Duration,
        Reason::VadDuration,
        Reason::Rms,
        Reason::Similarity,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: Reason,
}

/// Verdicts sorted by id; `stage_counts` holds rejections per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub stage_counts: BTreeMap<Reason, usize>,
}

impl FilterReport {
    fn build(ids: &[&str], verdicts: &[Option<Reason>], stages: &[Reason]) -> Self {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
        let mut stage_counts: BTreeMap<Reason, usize> = stages.iter().map(|&r| (r, 0)).collect();
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for i in order {
            match verdicts[i] {
                None => accepted.push(ids[i].to_string()),
                Some(reason) => {
                    *stage_counts.entry(reason).or_default() += 1;
                    rejected.push(Rejection {
                        id: ids[i].to_string(),
                        reason,
                    });
                }
            }
        }
        Self {
            accepted,
            rejected,
            stage_counts,
        }
    }

    pub fn total(&self) -> usize {
        self.accepted.len() + self.rejected.len()
    }
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<Vec<&'a str>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Config(format!("duplicate record id {id:?}")));
        }
        out.push(id);
    }
    Ok(out)
}

/// Linear interpolation at `p (n - 1)` over the sorted sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(Q1 - 1.5 IQR, Q3 + 1.5 IQR)`.
pub fn iqr_bounds(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile(&v, 0.25);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    Some((q1 - 1.5 * iqr, q3 + 1.5 * iqr))
}

/// Applies the five training filters in order; the first failure is the reason.
pub fn filter_training(
    records: &[CorpusRecord],
    policy: &LangPolicy,
    scorers: &ScorerSuite,
    cfg: &FilterConfig,
) -> Result<FilterReport> {
    let ids = unique_ids(records.iter().map(|r| r.id.as_str()))?;
    for r in records {
        r.validate()?;
        if !policy.contains_key(&r.lang) {
            return Err(Error::MissingPolicy(r.lang.clone()));
        }
        if cfg.quality_threshold.is_some() && r.quality_score.is_none() {
            return Err(Error::MissingQuality(r.id.clone()));
        }
    }
    let mut verdict: Vec<Option<Reason>> = vec![None; records.len()];
    let alive =
        |v: &[Option<Reason>]| -> Vec<usize> { (0..v.len()).filter(|&i| v[i].is_none()).collect() };

    for (i, r) in records.iter().enumerate() {
        if r.duration_s < cfg.min_duration_s || r.duration_s > cfg.max_duration_s {
            verdict[i] = Some(Reason::Duration);
        }
    }

    let survivors = alive(&verdict);
    let mut iqr: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (lang, p) in policy {
        if *p == RatePolicy::Iqr {
            let rates: Vec<f64> = survivors
                .iter()
                .filter(|&&i| records[i].lang == *lang)
                .map(|&i| records[i].speaking_rate())
                .collect();
            if let Some(b) = iqr_bounds(&rates) {
                iqr.insert(lang, b);
            }
        }
    }
    for &i in &survivors {
        let r = &records[i];
        let rate = r.speaking_rate();
        let (lo, hi) = match policy[&r.lang] {
            RatePolicy::Fixed { min_cps, max_cps } => (min_cps, max_cps),
            RatePolicy::Iqr => iqr[r.lang.as_str()],
        };
        if rate < lo || rate > hi {
            verdict[i] = Some(Reason::SpeakingRate);
        }
    }

    for i in alive(&verdict) {
        let r = &records[i];
        if scorers.language.detect(&r.transcript).as_deref() != Some(r.lang.as_str()) {
            verdict[i] = Some(Reason::Language);
        }
    }

    let survivors = alive(&verdict);
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for &i in &survivors {
        *counts
            .entry((&records[i].lang, &records[i].transcript))
            .or_default() += 1;
    }
    for &i in &survivors {
        if counts[&(records[i].lang.as_str(), records[i].transcript.as_str())] > cfg.dedup_limit {
            verdict[i] = Some(Reason::Duplicate);
        }
    }

    if let Some(th) = cfg.quality_threshold {
        for i in alive(&verdict) {
            if records[i].quality_score.expect("checked above") < th {
                verdict[i] = Some(Reason::Quality);
            }
        }
    }
    Ok(FilterReport::build(&ids, &verdict, &Reason::TRAINING))
}

/// A record together with its loaded features.
#[derive(Debug, Clone)]
pub struct Clip {
    pub record: CorpusRecord,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone)]
pub struct BenchmarkPair {
    pub id: String,
    pub prompt: Clip,
    pub truth: Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_rms: f64,
    pub min_similarity: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            min_duration_s: 2.0,
            max_duration_s: 16.0,
            min_rms: 0.02,
            min_similarity: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    #[serde(flatten)]
    pub report: FilterReport,
    /// Accepted pairs per language of the ground-truth record.
    pub language_counts: BTreeMap<String, usize>,
    pub speaker_counts: BTreeMap<String, usize>,
    pub distinct_speakers: usize,
}

/// A curated pair with silence trimmed.
#[derive(Debug, Clone)]
pub struct CuratedPair {
    pub id: String,
    pub prompt: Clip,
    pub truth: Clip,
    pub similarity: f64,
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a.dot(a).sqrt() * b.dot(b).sqrt();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

pub fn curate_benchmark(
    pairs: &[BenchmarkPair],
    scorers: &ScorerSuite,
    cfg: &CurationConfig,
) -> Result<(CurationReport, Vec<CuratedPair>)> {
    let ids = unique_ids(pairs.iter().map(|p| p.id.as_str()))?;
    for p in pairs {
        p.prompt.record.validate()?;
        p.truth.record.validate()?;
        if p.prompt.record.speaker != p.truth.record.speaker {
            return Err(Error::Config(format!("pair {:?} mixes speakers", p.id)));
        }
    }
    let in_range = |d: f64| d >= cfg.min_duration_s && d <= cfg.max_duration_s;
    let mut verdicts = Vec::with_capacity(pairs.len());
    let mut curated = Vec::new();
    for p in pairs {
        let verdict = (|| {
            if !in_range(p.prompt.record.duration_s) || !in_range(p.truth.record.duration_s) {
                return Err(Reason::Duration);
            }
            let trim = |c: &Clip| {
                scorers
                    .vad
                    .trim(&c.features)
                    .filter(|f| in_range(f.duration_s()))
            };
            let (Some(tp), Some(tt)) = (trim(&p.prompt), trim(&p.truth)) else {
                return Err(Reason::VadDuration);
            };
            if tp.rms() < cfg.min_rms || tt.rms() < cfg.min_rms {
                return Err(Reason::Rms);
            }
            let sim = cosine(&scorers.embedder.embed(&tp), &scorers.embedder.embed(&tt));
            if sim < cfg.min_similarity {
                return Err(Reason::Similarity);
            }
            Ok((tp, tt, sim))
        })();
        match verdict {
            Ok((tp, tt, similarity)) => {
                let clip = |c: &Clip, f: FeatureSequence| Clip {
                    record: CorpusRecord {
                        duration_s: f.duration_s(),
                        ..c.record.clone()
                    },
                    features: f,
                };
                curated.push(CuratedPair {
                    id: p.id.clone(),
                    prompt: clip(&p.prompt, tp),
                    truth: clip(&p.truth, tt),
                    similarity,
                });
                verdicts.push(None);
            }
            Err(r) => verdicts.push(Some(r)),
        }
    }
    curated.sort_by(|a, b| a.id.cmp(&b.id));
    let mut language_counts = BTreeMap::new();
    let mut speaker_counts: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for c in &curated {
        *language_counts
            .entry(c.truth.record.lang.clone())
            .or_default() += 1;
        speaker_counts
            .entry(c.truth.record.lang.clone())
            .or_default()
            .insert(&c.truth.record.speaker);
    }
    let distinct_speakers = curated
        .iter()
        .map(|c| c.truth.record.speaker.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    let report = CurationReport {
        report: FilterReport::build(&ids, &verdicts, &Reason::BENCHMARK),
        language_counts,
        speaker_counts: speaker_counts
            .into_iter()
            .map(|(k, v)| (k, v.len()))
            .collect(),
        distinct_speakers,
    };
    Ok((report, curated))
}

/// Per language, highest quality first (ties by id), stopping at the first
/// record that would push the total past the budget. Result is sorted by id.
pub fn rank_top_hours(
    records: &[CorpusRecord],
    per_lang_budget_hours: f64,
) -> Result<Vec<CorpusRecord>> {
    let mut by_lang: BTreeMap<&str, Vec<&CorpusRecord>> = BTreeMap::new();
    for r in records {
        if r.quality_score.is_none() {
            return Err(Error::MissingQuality(r.id.clone()));
        }
        by_lang.entry(&r.lang).or_default().push(r);
    }
    let budget_s = per_lang_budget_hours * 3600.0;
    let mut out = Vec::new();
    for (_, mut rs) in by_lang {
        rs.sort_by(|a, b| {
            b.quality_score
                .unwrap()
                .total_cmp(&a.quality_score.unwrap())
                .then_with(|| a.id.cmp(&b.id))
        });
        let mut used = 0.0;
        for r in rs {
            if used + r.duration_s > budget_s {
                break;
            }
            used += r.duration_s;
            out.push(r.clone());
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn write_report<W: Write, T: Serialize>(mut w: W, report: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    Ok(())
}

//! Real / synthetic pair construction for transcript-free fine-tuning.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::SolverConfig;
use crate::conditioning::LanguageId;
use crate::corpus::{rank_top_hours, Clip, CorpusRecord};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::field_net::{sample, Checkpoint, PromptText, SampleRequest, TrainPair};
use crate::guidance::GuidanceConfig;
use crate::infill::Stage;
use crate::seed;
use crate::toy::ToyWorld;

/// Draws from the pool until the length ratio lands in this range.
pub const RATIO_RANGE: (f64, f64) = (0.5, 1.5);
const MAX_TEXT_DRAWS: usize = 64;

/// Synthetic prompt `prompt` followed by the real recording `target`. The
/// text used to synthesise the prompt is not kept.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub id: String,
    pub prompt: FeatureSequence,
    pub target: Clip,
}

/// Paired-manifest row. There is no field for the prompt's text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub prompt_features: String,
    pub target_features: String,
    pub target_transcript: String,
    pub lang: String,
    pub speaker: String,
}

impl PairRecord {
    /// Manifest row for the real target, given its loaded features.
    pub fn target_record(&self, features: &FeatureSequence) -> CorpusRecord {
        CorpusRecord {
            id: self.id.clone(),
            lang: self.lang.clone(),
            transcript: self.target_transcript.clone(),
            speaker: self.speaker.clone(),
            duration_s: features.duration_s(),
            char_count: self.target_transcript.chars().count(),
            quality_score: None,
            features: Some(self.target_features.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    pub per_lang_budget_hours: f64,
    pub guidance: GuidanceConfig,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Worker threads; output does not depend on it.
    pub jobs: usize,
}

/// Ranks `records` by quality within the budget and synthesises one prompt
/// per selected record with the Stage-1 model. Output is sorted by id.
pub fn make_pairs(
    ckpt: &Checkpoint,
    world: &ToyWorld,
    records: &[Clip],
    text_pool: &BTreeMap<String, Vec<String>>,
    cfg: &PairConfig,
) -> Result<Vec<SynthPair>> {
    if ckpt.stage != Stage::S1 {
        return Err(Error::Config(
            "pairs are synthesised with a stage-1 checkpoint".into(),
        ));
    }
    let rows: Vec<CorpusRecord> = records.iter().map(|c| c.record.clone()).collect();
    let selected = rank_top_hours(&rows, cfg.per_lang_budget_hours)?;
    let by_id: BTreeMap<&str, &Clip> = records.iter().map(|c| (c.record.id.as_str(), c)).collect();
    let chosen: Vec<&Clip> = selected.iter().map(|r| by_id[r.id.as_str()]).collect();
    for c in &chosen {
        if text_pool.get(&c.record.lang).is_none_or(Vec::is_empty) {
            return Err(Error::Config(format!(
                "empty text pool for {}",
                c.record.lang
            )));
        }
    }
    let one = |clip: &&Clip| -> Result<SynthPair> {
        synthesize(ckpt, world, clip, &text_pool[&clip.record.lang], cfg).map_err(|e| {
            Error::Synthesis {
                id: clip.record.id.clone(),
                source: Box::new(e),
            }
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| chosen.par_iter().map(one).collect())
}

fn synthesize(
    ckpt: &Checkpoint,
    world: &ToyWorld,
    clip: &Clip,
    pool: &[String],
    cfg: &PairConfig,
) -> Result<SynthPair> {
    let r = &clip.record;
    let li = world.lang_index(&r.lang)?;
    let lid = LanguageId::Lang(li as u16);
    let prompt_ids = ckpt.vocab.encode(&world.tokenize(li, &r.transcript)?)?;
    let mut rng = seed::rng(cfg.seed, &format!("pairs.{}", r.id));
    let k = prompt_ids.len() as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..MAX_TEXT_DRAWS {
        let text = &pool[rng.gen_range(0..pool.len())];
        let ids = ckpt.vocab.encode(&world.tokenize(li, text)?)?;
        let ratio = ids.len() as f64 / k;
        let miss = (RATIO_RANGE.0 - ratio).max(ratio - RATIO_RANGE.1).max(0.0);
        if best.as_ref().is_none_or(|b| miss < b.0) {
            best = Some((miss, ids));
        }
        if miss == 0.0 {
            break;
        }
    }
    let (_, target_ids) = best.expect("at least one draw");
    let req = SampleRequest {
        prompt: clip.features.clone(),
        prompt_text: Some(PromptText {
            ids: prompt_ids,
            lid,
        }),
        target_ids,
        target_lid: lid,
    };
    let prompt = sample(ckpt, &req, &cfg.guidance, &cfg.solver, rng.gen())?;
    Ok(SynthPair {
        id: r.id.clone(),
        prompt,
        target: clip.clone(),
    })
}

impl SynthPair {
    pub fn to_train_pair(&self, world: &ToyWorld, ckpt: &Checkpoint) -> Result<TrainPair> {
        Ok(TrainPair {
            id: self.id.clone(),
            prompt: self.prompt.clone(),
            target: world.train_utterance(&self.target, &ckpt.vocab)?,
        })
    }

    pub fn record(&self, prompt_features: String, target_features: String) -> PairRecord {
        let r = &self.target.record;
        PairRecord {
            id: self.id.clone(),
            prompt_features,
            target_features,
            target_transcript: r.transcript.clone(),
            lang: r.lang.clone(),
            speaker: r.speaker.clone(),
        }
    }
}

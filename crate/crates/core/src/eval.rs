//! Metrics against toy ground truth.

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::SolverConfig;
use crate::conditioning::LanguageId;
use crate::corpus::{cosine, Clip};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::field_net::{sample, Checkpoint, PromptText, SampleRequest};
use crate::guidance::GuidanceConfig;
use crate::infill::Stage;
use crate::phonemes::PhoneticToken;
use crate::seed;
use crate::toy::ToyWorld;

/// Mean frame per token, with frame `v` of `T` belonging to token `v * M / T`.
pub fn token_means(generated: &FeatureSequence, tokens: usize) -> Result<Array2<f64>> {
    let t = generated.len();
    if tokens == 0 || tokens > t {
        return Err(Error::Layout(format!("{tokens} tokens over {t} frames")));
    }
    let mut sums = Array2::zeros((tokens, generated.dim()));
    let mut counts = vec![0.0; tokens];
    for v in 0..t {
        let k = v * tokens / t;
        let mut r = sums.row_mut(k);
        r += &generated.frame(v);
        counts[k] += 1.0;
    }
    for (k, c) in counts.iter().enumerate() {
        let mut r = sums.row_mut(k);
        r /= *c;
    }
    Ok(sums)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    /// Tokens nearer their own language's prototype than any other's.
    pub correct: usize,
    /// Tokens whose unit exists in at least one other language.
    pub contested: usize,
    /// Sum over all tokens of the distance to the correct prototype.
    pub distance_sum: f64,
    pub tokens: usize,
}

impl LanguageScore {
    pub fn add(&mut self, o: &LanguageScore) {
        self.correct += o.correct;
        self.contested += o.contested;
        self.distance_sum += o.distance_sum;
        self.tokens += o.tokens;
    }

    pub fn rate(&self) -> f64 {
        if self.contested == 0 {
            0.0
        } else {
            self.correct as f64 / self.contested as f64
        }
    }

    pub fn mean_distance(&self) -> f64 {
        self.distance_sum / self.tokens.max(1) as f64
    }
}

fn dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a - b;
    d.dot(&d).sqrt()
}

/// Compares each token mean, minus the speaker offset, with the prototype of
/// the same unit in every language that has it.
pub fn language_score(
    world: &ToyWorld,
    generated: &FeatureSequence,
    lang: usize,
    tokens: &[PhoneticToken],
    offset: &Array1<f64>,
) -> Result<LanguageScore> {
    let means = token_means(generated, tokens.len())?;
    let mut s = LanguageScore::default();
    for (k, tok) in tokens.iter().enumerate() {
        let x = &means.row(k).to_owned() - offset;
        let own = dist(&x, world.prototype(lang, &tok.text)?);
        s.distance_sum += own;
        s.tokens += 1;
        let rivals: Vec<f64> = (0..world.prototypes.len())
            .filter(|&o| o != lang)
            .filter_map(|o| world.prototypes[o].get(&tok.text))
            .map(|p| dist(&x, p))
            .collect();
        if !rivals.is_empty() {
            s.contested += 1;
            if rivals.iter().all(|&r| own < r) {
                s.correct += 1;
            }
        }
    }
    Ok(s)
}

/// Mean over tokens of `token mean - prototype`.
pub fn estimate_offset(
    world: &ToyWorld,
    generated: &FeatureSequence,
    lang: usize,
    tokens: &[PhoneticToken],
) -> Result<Array1<f64>> {
    let means = token_means(generated, tokens.len())?;
    let mut acc = Array1::zeros(generated.dim());
    for (k, tok) in tokens.iter().enumerate() {
        acc += &(&means.row(k) - world.prototype(lang, &tok.text)?);
    }
    Ok(acc / tokens.len() as f64)
}

/// One generation: a prompt clip (whose speaker is the ground-truth voice)
/// and text to speak in `target_lang`.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub prompt: Clip,
    pub target_text: String,
    pub target_lang: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cases: usize,
    pub language: LanguageScore,
    /// Mean cosine between estimated and true speaker offsets.
    pub offset_cosine: f64,
}

/// Prompts cycle through `prompts`; the target language is the prompt's own
/// language, or the next one in the world's list when `cross_lingual`.
pub fn eval_cases(
    world: &ToyWorld,
    prompts: &[Clip],
    n: usize,
    cross_lingual: bool,
    seed: u64,
) -> Result<Vec<EvalCase>> {
    if prompts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let langs = world.spec.languages.len();
    if cross_lingual && langs < 2 {
        return Err(Error::Config(
            "cross-lingual cases need two languages".into(),
        ));
    }
    let mut rng = seed::rng(seed, "eval.cases");
    (0..n)
        .map(|i| {
            let prompt = prompts[i % prompts.len()].clone();
            let pl = world.lang_index(&prompt.record.lang)?;
            let tl = if cross_lingual {
                (pl + 1 + rng.gen_range(0..langs - 1)) % langs
            } else {
                pl
            };
            Ok(EvalCase {
                target_text: world.random_sentence(tl, &mut rng),
                target_lang: world.spec.languages[tl].clone(),
                prompt,
            })
        })
        .collect()
}

/// Samples every case (Stage-1 checkpoints get the prompt transcript,
/// Stage-2 ones do not) and scores the output against ground truth.
pub fn evaluate(
    ckpt: &Checkpoint,
    world: &ToyWorld,
    cases: &[EvalCase],
    guidance: &GuidanceConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<EvalSummary> {
    let per_case: Vec<(LanguageScore, f64)> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| -> Result<(LanguageScore, f64)> {
            let pl = world.lang_index(&c.prompt.record.lang)?;
            let tl = world.lang_index(&c.target_lang)?;
            let tokens = world.tokenize(tl, &c.target_text)?;
            let prompt_text = match ckpt.stage {
                Stage::S1 => Some(PromptText {
                    ids: ckpt
                        .vocab
                        .encode(&world.tokenize(pl, &c.prompt.record.transcript)?)?,
                    lid: LanguageId::Lang(pl as u16),
                }),
                Stage::S2 => None,
            };
            let req = SampleRequest {
                prompt: c.prompt.features.clone(),
                prompt_text,
                target_ids: ckpt.vocab.encode(&tokens)?,
                target_lid: LanguageId::Lang(tl as u16),
            };
            let out = sample(
                ckpt,
                &req,
                guidance,
                solver,
                seed::sub_seed(seed, &format!("eval.{i}")),
            )?;
            let offset = world.speaker_offset(&c.prompt.record.speaker);
            let score = language_score(world, &out, tl, &tokens, &offset)?;
            let est = estimate_offset(world, &out, tl, &tokens)?;
            Ok((score, cosine(&est, &offset)))
        })
        .collect::<Result<_>>()?;
    let mut summary = EvalSummary {
        cases: cases.len(),
        ..Default::default()
    };
    for (s, c) in &per_case {
        summary.language.add(s);
        summary.offset_cosine += c;
    }
    summary.offset_cosine /= cases.len().max(1) as f64;
    Ok(summary)
}

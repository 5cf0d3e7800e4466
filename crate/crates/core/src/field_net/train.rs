//! Stage-1 and Stage-2 training loops.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, Checkpoint, LrSchedule, TrainItem};
use crate::conditioning::LanguageId;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::infill::{Layout, Stage};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub cond_drop_audio_p: f64,
    pub cond_drop_all_p: f64,
    pub weight_decay: f64,
    pub eval_items: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_peak: 3e-3,
            warmup_steps: 150,
            seed: 0,
            cond_drop_audio_p: 0.15,
            cond_drop_all_p: 0.15,
            weight_decay: 1e-4,
            eval_items: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.cond_drop_audio_p, self.cond_drop_all_p);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a + b > 1.0 {
            return Err(Error::Config(format!("bad drop probabilities ({a}, {b})")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_steps > self.steps && self.steps > 0 {
            return Err(Error::Config("warmup longer than training".into()));
        }
        Ok(())
    }
}

/// Which conditions an evaluation sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// Audio, text and language.
    Full,
    /// Audio dropped; text and language kept.
    TextOnly,
    /// Everything dropped.
    Uncond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropSampler {
    pub audio_p: f64,
    pub all_p: f64,
}

impl DropSampler {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> DropMode {
        let u: f64 = rng.gen();
        if u < self.audio_p {
            DropMode::TextOnly
        } else if u < self.audio_p + self.all_p {
            DropMode::Uncond
        } else {
            DropMode::Full
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub id: String,
    pub speaker: String,
    pub lang: LanguageId,
    pub ids: Vec<usize>,
    pub features: FeatureSequence,
}

/// A synthetic prompt and the real recording it should lead into. No prompt
/// transcript is carried.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub prompt: FeatureSequence,
    pub target: TrainUtterance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub eval_initial: f64,
    pub eval_final: f64,
}

struct Draw {
    layout: Layout,
    prompt: usize,
    target: usize,
    x0: ndarray::Array2<f64>,
    t: f64,
    drop: DropMode,
}

trait ItemSource {
    fn len(&self) -> usize;
    /// Returns `(layout, prompt features, target features)` for example `i`.
    fn layout<R: Rng>(&self, i: usize, rng: &mut R) -> Result<(Layout, usize)>;
    fn prompt(&self, key: usize) -> &FeatureSequence;
    fn target(&self, i: usize) -> &FeatureSequence;
}

struct Stage1Source<'a> {
    utts: &'a [TrainUtterance],
    by_speaker: Vec<Vec<usize>>,
}

impl<'a> Stage1Source<'a> {
    fn new(utts: &'a [TrainUtterance]) -> Self {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in utts.iter().enumerate() {
            groups.entry(&u.speaker).or_default().push(i);
        }
        let mut by_speaker = vec![Vec::new(); utts.len()];
        for members in groups.values() {
            for &i in members {
                by_speaker[i] = members.iter().copied().filter(|&j| j != i).collect();
            }
        }
        Self { utts, by_speaker }
    }
}

impl ItemSource for Stage1Source<'_> {
    fn len(&self) -> usize {
        self.utts.len()
    }

    fn layout<R: Rng>(&self, i: usize, rng: &mut R) -> Result<(Layout, usize)> {
        let others = &self.by_speaker[i];
        let p = if others.is_empty() {
            i
        } else {
            others[rng.gen_range(0..others.len())]
        };
        let (pu, tu) = (&self.utts[p], &self.utts[i]);
        let lay = Layout::stage1(
            &pu.ids,
            pu.lang,
            &tu.ids,
            tu.lang,
            pu.features.len(),
            tu.features.len(),
        )?;
        Ok((lay, p))
    }

    fn prompt(&self, key: usize) -> &FeatureSequence {
        &self.utts[key].features
    }

    fn target(&self, i: usize) -> &FeatureSequence {
        &self.utts[i].features
    }
}

struct Stage2Source<'a> {
    pairs: &'a [TrainPair],
}

impl ItemSource for Stage2Source<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn layout<R: Rng>(&self, i: usize, _rng: &mut R) -> Result<(Layout, usize)> {
        let p = &self.pairs[i];
        let lay = Layout::stage2(
            &p.target.ids,
            p.target.lang,
            p.prompt.len(),
            p.target.features.len(),
        )?;
        Ok((lay, i))
    }

    fn prompt(&self, key: usize) -> &FeatureSequence {
        &self.pairs[key].prompt
    }

    fn target(&self, i: usize) -> &FeatureSequence {
        &self.pairs[i].target.features
    }
}

fn draw_items<S: ItemSource>(
    src: &S,
    n: usize,
    drops: &DropSampler,
    rng: &mut ChaCha8Rng,
    feat: usize,
) -> Result<Vec<Draw>> {
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..src.len());
            let (layout, prompt) = src.layout(i, rng)?;
            let t: f64 = rng.gen();
            let drop = drops.draw(rng);
            let x0 = seed::standard_normal(rng, layout.tau2, feat);
            Ok(Draw {
                layout,
                prompt,
                target: i,
                x0,
                t,
                drop,
            })
        })
        .collect()
}

fn as_items<'a, S: ItemSource>(src: &'a S, draws: &'a [Draw]) -> Vec<TrainItem<'a>> {
    draws
        .iter()
        .map(|d| TrainItem {
            layout: &d.layout,
            prompt: src.prompt(d.prompt),
            target: src.target(d.target),
            x0: d.x0.clone(),
            t: d.t,
            drop: d.drop,
        })
        .collect()
}

fn run<S: ItemSource>(
    init: &Checkpoint,
    src: &S,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if src.len() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut ckpt = init.clone();
    ckpt.stage = stage;
    ckpt.train_config = Some(*cfg);
    let feat = ckpt.net.dims.feat;
    let drops = DropSampler {
        audio_p: cfg.cond_drop_audio_p,
        all_p: cfg.cond_drop_all_p,
    };
    let mut eval_rng = seed::rng(cfg.seed, "train.eval");
    let eval = draw_items(src, cfg.eval_items.max(1), &drops, &mut eval_rng, feat)?;
    let eval_items = as_items(src, &eval);
    let mut log = TrainLog {
        eval_initial: ckpt.net.batch_loss(&eval_items)?,
        ..Default::default()
    };
    let sched = LrSchedule {
        peak: cfg.lr_peak,
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    let mut opt = AdamW::new(&ckpt.net, cfg.weight_decay);
    let mut rng = seed::rng(cfg.seed, "train.batches");
    for step in 0..cfg.steps {
        let draws = draw_items(src, cfg.batch_size, &drops, &mut rng, feat)?;
        let items = as_items(src, &draws);
        let (loss, grads) = ckpt.net.loss_and_grad(&items)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.step_losses.push(loss);
        opt.step(&mut ckpt.net, &grads, sched.at(step + 1));
    }
    log.eval_final = ckpt.net.batch_loss(&eval_items)?;
    Ok((ckpt, log))
}

/// Infilling with both transcripts; prompts are other utterances of the
/// same speaker.
pub fn train_stage1(
    init: &Checkpoint,
    utterances: &[TrainUtterance],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    run(init, &Stage1Source::new(utterances), cfg, Stage::S1)
}

/// Transcript-free infilling on synthetic-prompt / real-target pairs.
pub fn train_stage2(
    ckpt: &Checkpoint,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if ckpt.stage != Stage::S1 && ckpt.stage != Stage::S2 {
        return Err(Error::Config(
            "stage-2 starts from a trained checkpoint".into(),
        ));
    }
    run(ckpt, &Stage2Source { pairs }, cfg, Stage::S2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn drop_frequencies_within_three_sigma() {
        let s = DropSampler {
            audio_p: 0.15,
            all_p: 0.15,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut a, mut u) = (0usize, 0usize);
        for _ in 0..n {
            match s.draw(&mut rng) {
                DropMode::TextOnly => a += 1,
                DropMode::Uncond => u += 1,
                DropMode::Full => {}
            }
        }
        let sigma = (0.15f64 * 0.85 / n as f64).sqrt();
        assert!((a as f64 / n as f64 - 0.15).abs() < 3.0 * sigma);
        assert!((u as f64 / n as f64 - 0.15).abs() < 3.0 * sigma);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            cond_drop_audio_p: 0.7,
            cond_drop_all_p: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

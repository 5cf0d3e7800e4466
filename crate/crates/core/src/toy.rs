//! Synthetic "toy speech": every token emits `frames_per_token` frames of a
//! per-(language, unit) prototype plus a per-speaker offset plus noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{LanguageId, LanguageTable};
use crate::corpus::{Clip, CorpusRecord, MeanAbsQuality, QualityScorer, ScorerSuite};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::field_net::TrainUtterance;
use crate::phonemes::{builtin_lexicon, tokenize, Lexicon, PhoneticToken, Vocabulary};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub languages: Vec<String>,
    /// Lexicon file per language; the built-in table is used when absent.
    pub lexicon_paths: BTreeMap<String, PathBuf>,
    pub noise_sigma: f64,
    pub offset_sigma: f64,
    pub feat_dim: usize,
    pub frames_per_token: usize,
    pub frame_rate_hz: f64,
    pub train_speakers_per_lang: usize,
    pub heldout_speakers_per_lang: usize,
    pub heldout_utterances_per_speaker: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            languages: vec!["toyA".into(), "toyB".into()],
            lexicon_paths: BTreeMap::new(),
            noise_sigma: 0.05,
            offset_sigma: 0.7,
            feat_dim: 8,
            frames_per_token: 4,
            frame_rate_hz: 25.0,
            train_speakers_per_lang: 50,
            heldout_speakers_per_lang: 10,
            heldout_utterances_per_speaker: 2,
            min_words: 2,
            max_words: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Speaker {
    pub name: String,
    pub lang: String,
    pub heldout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub spec: WorldSpec,
    pub lexica: Vec<Lexicon>,
    /// `prototypes[lang][unit]`.
    pub prototypes: Vec<BTreeMap<String, Array1<f64>>>,
    pub speakers: Vec<Speaker>,
}

impl ToyWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        if spec.languages.is_empty() || spec.feat_dim == 0 || spec.frames_per_token == 0 {
            return Err(Error::Config(
                "world needs languages, feat_dim and frames_per_token".into(),
            ));
        }
        if spec.min_words == 0 || spec.min_words > spec.max_words {
            return Err(Error::Config("bad sentence length range".into()));
        }
        if !(spec.noise_sigma >= 0.0 && spec.offset_sigma >= 0.0) {
            return Err(Error::Config("sigmas must be non-negative".into()));
        }
        let lexica = spec
            .languages
            .iter()
            .map(|code| match spec.lexicon_paths.get(code) {
                Some(p) => Lexicon::load(p),
                None => builtin_lexicon(code),
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes = draw_prototypes(&spec, &lexica);
        let mut speakers = Vec::new();
        for code in &spec.languages {
            for i in 0..spec.train_speakers_per_lang {
                speakers.push(Speaker {
                    name: format!("{code}-spk{i:02}"),
                    lang: code.clone(),
                    heldout: false,
                });
            }
            for i in 0..spec.heldout_speakers_per_lang {
                speakers.push(Speaker {
                    name: format!("{code}-held{i:02}"),
                    lang: code.clone(),
                    heldout: true,
                });
            }
        }
        Ok(Self {
            spec,
            lexica,
            prototypes,
            speakers,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save_spec(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn lang_index(&self, code: &str) -> Result<usize> {
        self.spec
            .languages
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn language_table(&self) -> LanguageTable {
        LanguageTable::new(self.spec.languages.iter().cloned()).expect("validated languages")
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_lexica(self.lexica.iter()).expect("lexica are valid")
    }

    pub fn lexica_by_code(&self) -> Vec<(String, Lexicon)> {
        self.spec
            .languages
            .iter()
            .cloned()
            .zip(self.lexica.iter().cloned())
            .collect()
    }

    /// Toy scorers; the embedder reference is the mean of all prototypes.
    pub fn scorers(&self) -> ScorerSuite {
        ScorerSuite::toy(self.lexica_by_code(), Some(self.mean_prototype()))
    }

    pub fn mean_prototype(&self) -> Array1<f64> {
        let mut acc = Array1::zeros(self.spec.feat_dim);
        let mut n = 0.0;
        for p in self.prototypes.iter().flat_map(|m| m.values()) {
            acc += p;
            n += 1.0;
        }
        acc / n
    }

    pub fn prototype(&self, lang: usize, unit: &str) -> Result<&Array1<f64>> {
        self.prototypes
            .get(lang)
            .and_then(|m| m.get(unit))
            .ok_or_else(|| Error::UnknownToken(unit.to_string()))
    }

    pub fn speaker_offset(&self, speaker: &str) -> Array1<f64> {
        let mut rng = seed::rng(self.spec.seed, &format!("toy.offset.{speaker}"));
        seed::standard_normal(&mut rng, 1, self.spec.feat_dim)
            .row(0)
            .to_owned()
            * self.spec.offset_sigma
    }

    pub fn speakers_of(&self, lang: &str, heldout: bool) -> Vec<&Speaker> {
        self.speakers
            .iter()
            .filter(|s| s.lang == lang && s.heldout == heldout)
            .collect()
    }

    pub fn tokenize(&self, lang: usize, transcript: &str) -> Result<Vec<PhoneticToken>> {
        tokenize(&self.lexica[lang], transcript)
    }

    /// Frames for `tokens`; `rng = None` gives the noiseless rendering.
    pub fn render(
        &self,
        lang: usize,
        speaker: &str,
        tokens: &[PhoneticToken],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FeatureSequence> {
        if tokens.is_empty() {
            return Err(Error::Layout("nothing to render".into()));
        }
        let fpt = self.spec.frames_per_token;
        let d = self.spec.feat_dim;
        let offset = self.speaker_offset(speaker);
        let mut frames = Array2::zeros((tokens.len() * fpt, d));
        for (k, tok) in tokens.iter().enumerate() {
            let base = self.prototype(lang, &tok.text)? + &offset;
            for j in 0..fpt {
                frames.row_mut(k * fpt + j).assign(&base);
            }
        }
        if let Some(rng) = rng {
            frames += &(seed::standard_normal(rng, tokens.len() * fpt, d) * self.spec.noise_sigma);
        }
        FeatureSequence::new(frames, self.spec.frame_rate_hz)
    }

    pub fn random_sentence(&self, lang: usize, rng: &mut ChaCha8Rng) -> String {
        let words: Vec<&str> = self.lexica[lang].words().collect();
        let n = rng.gen_range(self.spec.min_words..=self.spec.max_words);
        (0..n)
            .map(|_| *words.choose(rng).expect("lexicon not empty"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Converts a manifest row plus its features into a training utterance.
    pub fn train_utterance(&self, clip: &Clip, vocab: &Vocabulary) -> Result<TrainUtterance> {
        let lang = self.lang_index(&clip.record.lang)?;
        let ids = vocab.encode(&self.tokenize(lang, &clip.record.transcript)?)?;
        Ok(TrainUtterance {
            id: clip.record.id.clone(),
            speaker: clip.record.speaker.clone(),
            lang: LanguageId::Lang(lang as u16),
            ids,
            features: clip.features.clone(),
        })
    }
}

fn draw_prototypes(spec: &WorldSpec, lexica: &[Lexicon]) -> Vec<BTreeMap<String, Array1<f64>>> {
    let mut rng = seed::rng(spec.seed, "toy.prototypes");
    let min_gap = 4.0 * spec.noise_sigma;
    loop {
        let protos: Vec<BTreeMap<String, Array1<f64>>> = lexica
            .iter()
            .map(|lex| {
                lex.inventory()
                    .into_iter()
                    .map(|u| {
                        (
                            u.text,
                            seed::standard_normal(&mut rng, 1, spec.feat_dim)
                                .row(0)
                                .to_owned(),
                        )
                    })
                    .collect()
            })
            .collect();
        let separated = protos.iter().enumerate().all(|(a, pa)| {
            protos[a + 1..].iter().all(|pb| {
                pa.iter().all(|(u, va)| {
                    pb.get(u).is_none_or(|vb| {
                        let diff = va - vb;
                        diff.dot(&diff).sqrt() > min_gap
                    })
                })
            })
        });
        if separated {
            return protos;
        }
    }
}

/// One utterance with its manifest row; noise comes from `seed`.
pub fn gen_utterance(
    world: &ToyWorld,
    lang: &str,
    speaker: &str,
    transcript: &str,
    id: &str,
    seed: u64,
) -> Result<(FeatureSequence, CorpusRecord)> {
    let li = world.lang_index(lang)?;
    let tokens = world.tokenize(li, transcript)?;
    let mut rng = seed::rng(seed, "toy.noise");
    let features = world.render(li, speaker, &tokens, Some(&mut rng))?;
    let record = CorpusRecord {
        id: id.to_string(),
        lang: lang.to_string(),
        transcript: transcript.to_string(),
        speaker: speaker.to_string(),
        duration_s: features.duration_s(),
        char_count: transcript.chars().count(),
        quality_score: Some(MeanAbsQuality.score(&features)),
        features: None,
    };
    Ok((features, record))
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: Vec<Clip>,
    pub heldout: Vec<Clip>,
    pub text_pool: BTreeMap<String, Vec<String>>,
}

/// Training utterances spread round-robin over the training speakers, a
/// fixed number per held-out speaker, and a text pool per language.
pub fn gen_corpus(
    world: &ToyWorld,
    utterances_per_lang: usize,
    text_pool_size: usize,
) -> Result<ToyCorpus> {
    let s = world.spec.seed;
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut text_pool = BTreeMap::new();
    for (li, code) in world.spec.languages.iter().enumerate() {
        let mut text_rng = seed::rng(s, &format!("toy.text.{code}"));
        let speakers = world.speakers_of(code, false);
        if utterances_per_lang > 0 && speakers.is_empty() {
            return Err(Error::Config(format!("no training speakers for {code}")));
        }
        for j in 0..utterances_per_lang {
            let id = format!("{code}-{j:05}");
            let text = world.random_sentence(li, &mut text_rng);
            let (features, record) = gen_utterance(
                world,
                code,
                &speakers[j % speakers.len()].name,
                &text,
                &id,
                seed::sub_seed(s, &id),
            )?;
            train.push(Clip { record, features });
        }
        if utterances_per_lang > 0 {
            for spk in world.speakers_of(code, true) {
                for k in 0..world.spec.heldout_utterances_per_speaker {
                    let id = format!("{}-{k:02}", spk.name);
                    let text = world.random_sentence(li, &mut text_rng);
                    let (features, record) =
                        gen_utterance(world, code, &spk.name, &text, &id, seed::sub_seed(s, &id))?;
                    heldout.push(Clip { record, features });
                }
            }
        }
        let mut pool_rng = seed::rng(s, &format!("toy.pool.{code}"));
        let pool = (0..text_pool_size)
            .map(|_| world.random_sentence(li, &mut pool_rng))
            .collect();
        text_pool.insert(code.clone(), pool);
    }
    Ok(ToyCorpus {
        train,
        heldout,
        text_pool,
    })
}

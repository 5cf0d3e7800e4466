//! Speech-infilling item construction.
//!
//! An item concatenates prompt and target frames (`tau = tau1 + tau2`), masks
//! the loss to the target, and pairs every frame position with a text token
//! `z[u]` and a textual language id `l[u]`. Text is padded with `<F>` to the
//! frame length. `align[u]` is the text position whose embedding frame `u`
//! reads: prompt frames spread evenly over the prompt-text span and target
//! frames over `c_1..c_M`.
//!
//! Stage-2 text is transcript-free:
//! `z = <P> x N, '.', ' ', c_1..c_M, <F> x (tau - N - M - 2)` and
//! `l = NONE x N, UNK, UNK, tgt x M, NONE x (tau - N - M - 2)`.

use serde::{Deserialize, Serialize};

use crate::conditioning::LanguageId;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::phonemes::{
    PhoneticToken, Vocabulary, EOS_PERIOD_ID, EOS_SPACE_ID, FILLER_ID, PROMPT_ID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1,
    S2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub stage: Stage,
    pub tau1: usize,
    pub tau2: usize,
    pub z: Vec<usize>,
    pub l: Vec<LanguageId>,
    pub align: Vec<usize>,
    pub time_lid: LanguageId,
    /// Prompt-text length: `N` placeholders in Stage-2, transcript length in Stage-1.
    pub prompt_len: usize,
    /// Index in `z` of the first target token.
    pub target_start: usize,
    pub target_len: usize,
}

impl Layout {
    pub fn tau(&self) -> usize {
        self.tau1 + self.tau2
    }

    pub fn mask(&self) -> Vec<u8> {
        mask_vec(self.tau1, self.tau2)
    }

    pub fn target_ids(&self) -> &[usize] {
        &self.z[self.target_start..self.target_start + self.target_len]
    }

    /// Stage-1 prompt transcript ids; empty for Stage-2.
    pub fn prompt_ids(&self) -> &[usize] {
        match self.stage {
            Stage::S1 => &self.z[..self.prompt_len],
            Stage::S2 => &[],
        }
    }

    /// Layout with both transcripts present.
    pub fn stage1(
        prompt_ids: &[usize],
        prompt_lid: LanguageId,
        target_ids: &[usize],
        target_lid: LanguageId,
        tau1: usize,
        tau2: usize,
    ) -> Result<Self> {
        check_lengths(tau1, tau2)?;
        let (k1, k2) = (prompt_ids.len(), target_ids.len());
        if k1 == 0 || k2 == 0 {
            return Err(Error::Layout("stage-1 needs prompt and target text".into()));
        }
        let tau = tau1 + tau2;
        if k1 + k2 > tau {
            return Err(Error::TargetTooLong);
        }
        let mut z = Vec::with_capacity(tau);
        z.extend_from_slice(prompt_ids);
        z.extend_from_slice(target_ids);
        z.resize(tau, FILLER_ID);
        let mut l = vec![prompt_lid; k1];
        l.extend(std::iter::repeat_n(target_lid, k2));
        l.resize(tau, LanguageId::None);
        Ok(Self {
            stage: Stage::S1,
            tau1,
            tau2,
            align: alignment(tau1, tau2, 0, k1, k1, k2),
            z,
            l,
            time_lid: target_lid,
            prompt_len: k1,
            target_start: k1,
            target_len: k2,
        })
    }

    /// Transcript-free layout with `N` derived from the duration ratio.
    pub fn stage2(
        target_ids: &[usize],
        target_lid: LanguageId,
        tau1: usize,
        tau2: usize,
    ) -> Result<Self> {
        if matches!(target_lid, LanguageId::None | LanguageId::Unknown) {
            return Err(Error::Layout(
                "stage-2 target needs a concrete language".into(),
            ));
        }
        let m = target_ids.len();
        let n = compute_prompt_token_count(tau1, tau2, m)?;
        let tau = tau1 + tau2;
        let mut z = vec![PROMPT_ID; n];
        z.push(EOS_PERIOD_ID);
        z.push(EOS_SPACE_ID);
        z.extend_from_slice(target_ids);
        z.resize(tau, FILLER_ID);
        let mut l = vec![LanguageId::None; n];
        l.push(LanguageId::Unknown);
        l.push(LanguageId::Unknown);
        l.extend(std::iter::repeat_n(target_lid, m));
        l.resize(tau, LanguageId::None);
        Ok(Self {
            stage: Stage::S2,
            tau1,
            tau2,
            align: alignment(tau1, tau2, 0, n, n + 2, m),
            z,
            l,
            time_lid: target_lid,
            prompt_len: n,
            target_start: n + 2,
            target_len: m,
        })
    }
}

fn check_lengths(tau1: usize, tau2: usize) -> Result<()> {
    if tau1 == 0 || tau2 == 0 {
        return Err(Error::Layout(format!(
            "lengths must be positive, got ({tau1}, {tau2})"
        )));
    }
    Ok(())
}

fn alignment(
    tau1: usize,
    tau2: usize,
    p_start: usize,
    p_len: usize,
    c_start: usize,
    c_len: usize,
) -> Vec<usize> {
    let prompt = (0..tau1).map(|u| p_start + u * p_len / tau1);
    let target = (0..tau2).map(|v| c_start + v * c_len / tau2);
    prompt.chain(target).collect()
}

fn mask_vec(tau1: usize, tau2: usize) -> Vec<u8> {
    let mut m = vec![0u8; tau1];
    m.resize(tau1 + tau2, 1);
    m
}

/// Zeros over the prompt, ones over the target.
pub fn build_mask(tau1: usize, tau2: usize) -> Result<Vec<u8>> {
    check_lengths(tau1, tau2)?;
    Ok(mask_vec(tau1, tau2))
}

/// `N = max(1, round(M * tau1 / tau2))`, clamped so `N + M + 2 <= tau`.
pub fn compute_prompt_token_count(tau1: usize, tau2: usize, m: usize) -> Result<usize> {
    check_lengths(tau1, tau2)?;
    if m == 0 {
        return Err(Error::Layout("target text is empty".into()));
    }
    let tau = tau1 + tau2;
    if m + 3 > tau {
        return Err(Error::TargetTooLong);
    }
    let n = ((m as f64 * tau1 as f64 / tau2 as f64).round() as usize).max(1);
    Ok(n.min(tau - m - 2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillExample {
    pub x1: FeatureSequence,
    pub mask: Vec<u8>,
    pub layout: Layout,
}

impl InfillExample {
    pub fn z(&self) -> &[usize] {
        &self.layout.z
    }

    pub fn l(&self) -> &[LanguageId] {
        &self.layout.l
    }

    pub fn n(&self) -> usize {
        self.layout.prompt_len
    }

    pub fn m(&self) -> usize {
        self.layout.target_len
    }
}

pub struct Segment<'a> {
    pub features: &'a FeatureSequence,
    pub tokens: &'a [PhoneticToken],
    pub lid: LanguageId,
}

pub fn build_stage1_example(
    prompt: Segment<'_>,
    target: Segment<'_>,
    vocab: &Vocabulary,
) -> Result<InfillExample> {
    let p_ids = vocab.encode(prompt.tokens)?;
    let t_ids = vocab.encode(target.tokens)?;
    let layout = Layout::stage1(
        &p_ids,
        prompt.lid,
        &t_ids,
        target.lid,
        prompt.features.len(),
        target.features.len(),
    )?;
    Ok(InfillExample {
        x1: prompt.features.concat(target.features)?,
        mask: layout.mask(),
        layout,
    })
}

/// The prompt's transcript is not an input here.
pub fn build_stage2_example(
    synthetic_prompt: &FeatureSequence,
    target_features: &FeatureSequence,
    target_tokens: &[PhoneticToken],
    target_lid: LanguageId,
    vocab: &Vocabulary,
) -> Result<InfillExample> {
    let t_ids = vocab.encode(target_tokens)?;
    let layout = Layout::stage2(
        &t_ids,
        target_lid,
        synthetic_prompt.len(),
        target_features.len(),
    )?;
    Ok(InfillExample {
        x1: synthetic_prompt.concat(target_features)?,
        mask: layout.mask(),
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonemes::{builtin_lexicon, tokenize, TokenKind};
    use proptest::prelude::*;

    #[test]
    fn mask_fixtures() {
        assert_eq!(build_mask(2, 3).unwrap(), vec![0, 0, 1, 1, 1]);
        assert_eq!(build_mask(1, 1).unwrap(), vec![0, 1]);
        assert!(build_mask(0, 3).is_err());
    }

    #[test]
    fn prompt_count_fixtures() {
        assert_eq!(compute_prompt_token_count(150, 300, 20).unwrap(), 10);
        assert_eq!(compute_prompt_token_count(40, 40, 7).unwrap(), 7);
        assert_eq!(compute_prompt_token_count(2, 400, 20).unwrap(), 1);
        assert!(matches!(
            compute_prompt_token_count(1, 3, 2),
            Err(Error::TargetTooLong)
        ));
    }

    #[test]
    fn stage2_golden_tau10() {
        let tgt = LanguageId::Lang(0);
        let (c1, c2, c3) = (10, 11, 12);
        // tau1 = 4, tau2 = 6, M = 3 gives N = round(3 * 4 / 6) = 2
        let lay = Layout::stage2(&[c1, c2, c3], tgt, 4, 6).unwrap();
        assert_eq!(lay.prompt_len, 2);
        assert_eq!(
            lay.z,
            vec![
                PROMPT_ID,
                PROMPT_ID,
                EOS_PERIOD_ID,
                EOS_SPACE_ID,
                c1,
                c2,
                c3,
                FILLER_ID,
                FILLER_ID,
                FILLER_ID
            ]
        );
        use LanguageId::{None as N0, Unknown as U};
        assert_eq!(lay.l, vec![N0, N0, U, U, tgt, tgt, tgt, N0, N0, N0]);
        assert_eq!(lay.time_lid, tgt);
        assert_eq!(lay.mask(), vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn stage1_layout_round_trip() {
        let lex = builtin_lexicon("toyA").unwrap();
        let vocab = Vocabulary::from_lexica([&lex]).unwrap();
        let p = tokenize(&lex, "tea net").unwrap();
        let t = tokenize(&lex, "moon").unwrap();
        let pf = FeatureSequence::zeros(4 * p.len(), 2, 25.0).unwrap();
        let tf = FeatureSequence::zeros(4 * t.len(), 2, 25.0).unwrap();
        let ex = build_stage1_example(
            Segment {
                features: &pf,
                tokens: &p,
                lid: LanguageId::Lang(0),
            },
            Segment {
                features: &tf,
                tokens: &t,
                lid: LanguageId::Lang(0),
            },
            &vocab,
        )
        .unwrap();
        assert_eq!(vocab.decode(ex.layout.prompt_ids()).unwrap(), p);
        assert_eq!(vocab.decode(ex.layout.target_ids()).unwrap(), t);
        assert_eq!(ex.mask.iter().filter(|&&m| m == 1).count(), tf.len());
        let langs: std::collections::BTreeSet<_> = ex
            .l()
            .iter()
            .filter(|l| matches!(l, LanguageId::Lang(_)))
            .collect();
        assert_eq!(langs.len(), 1);
        // frame u reads token u / 4 when every token spans four frames
        for (u, &a) in ex.layout.align.iter().enumerate() {
            assert_eq!(a, u / 4);
        }
        let bad = [PhoneticToken::new("zz", TokenKind::Articulatory)];
        assert!(build_stage1_example(
            Segment {
                features: &pf,
                tokens: &bad,
                lid: LanguageId::Lang(0)
            },
            Segment {
                features: &tf,
                tokens: &t,
                lid: LanguageId::Lang(0)
            },
            &vocab,
        )
        .is_err());
    }

    #[test]
    fn stage2_never_contains_prompt_text() {
        let lex = builtin_lexicon("toyB").unwrap();
        let vocab = Vocabulary::from_lexica([&lex]).unwrap();
        let t = tokenize(&lex, "μόνο νέο").unwrap();
        let pf = FeatureSequence::zeros(20, 2, 25.0).unwrap();
        let tf = FeatureSequence::zeros(4 * t.len(), 2, 25.0).unwrap();
        let ex = build_stage2_example(&pf, &tf, &t, LanguageId::Lang(0), &vocab).unwrap();
        assert_eq!(ex.z().len(), pf.len() + tf.len());
        assert!(ex.z()[..ex.n()].iter().all(|&i| i == PROMPT_ID));
        assert!(ex.layout.prompt_ids().is_empty());
        assert_eq!(ex.x1.len(), ex.mask.len());
    }

    proptest! {
        #[test]
        fn stage2_lid_positions_track_tokens(tau1 in 1usize..60, tau2 in 1usize..60, m in 1usize..30) {
            prop_assume!(m + 3 <= tau1 + tau2);
            let ids: Vec<usize> = (0..m).map(|i| 100 + i).collect();
            let tgt = LanguageId::Lang(1);
            let lay = Layout::stage2(&ids, tgt, tau1, tau2).unwrap();
            let tau = tau1 + tau2;
            prop_assert_eq!(lay.z.len(), tau);
            prop_assert_eq!(lay.l.len(), tau);
            prop_assert!(lay.prompt_len + m + 2 <= tau);
            for p in 0..tau {
                let is_c = lay.z[p] >= 100;
                prop_assert_eq!(lay.l[p] == tgt, is_c);
                let is_eos = lay.z[p] == EOS_PERIOD_ID || lay.z[p] == EOS_SPACE_ID;
                prop_assert_eq!(lay.l[p] == LanguageId::Unknown, is_eos);
                if !is_c && !is_eos {
                    prop_assert_eq!(lay.l[p], LanguageId::None);
                }
            }
            prop_assert_eq!(lay.mask().iter().map(|&v| v as usize).sum::<usize>(), tau2);
            prop_assert!(lay.align[tau1..].iter().all(|&a| lay.z[a] >= 100));
        }
    }
}

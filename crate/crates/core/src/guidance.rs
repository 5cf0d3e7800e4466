//! Classifier-free guidance: the joint form and the decoupled acoustic /
//! linguistic form with time-dependent strengths.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Joint,
    Decoupled,
    DecoupledAWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Joint strength; read only in joint mode.
    pub w: f64,
    pub w_a_start: f64,
    pub w_l_start: f64,
    pub t_warm: f64,
    pub t_decay: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::DecoupledAWarmup,
            w: 2.0,
            w_a_start: 2.5,
            w_l_start: 4.0,
            t_warm: 0.01,
            t_decay: 0.6,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.t_warm) {
            return Err(Error::OutOfRange {
                name: "t_warm",
                value: self.t_warm,
                range: "[0, 1)",
            });
        }
        if !(self.t_decay > self.t_warm && self.t_decay <= 1.0) {
            return Err(Error::OutOfRange {
                name: "t_decay",
                value: self.t_decay,
                range: "(t_warm, 1]",
            });
        }
        if self.w_a_start < 0.0 || self.w_l_start < 0.0 {
            return Err(Error::Config(
                "guidance start strengths must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Both strengths zero at every t.
    pub fn unguided() -> Self {
        Self {
            mode: GuidanceMode::Decoupled,
            w: 0.0,
            w_a_start: 0.0,
            w_l_start: 0.0,
            ..Self::default()
        }
    }
}

/// Predictions under (audio, text, language), (text, language) and no conditions.
#[derive(Debug, Clone)]
pub struct FieldTriple {
    pub v_full: Array2<f64>,
    pub v_text: Array2<f64>,
    pub v_uncond: Array2<f64>,
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// `v_cond + w (v_cond - v_uncond)`.
pub fn joint_cfg(v_cond: &Array2<f64>, v_uncond: &Array2<f64>, w: f64) -> Result<Array2<f64>> {
    same_shape(v_cond, v_uncond)?;
    let mut out = v_cond.clone();
    out.zip_mut_with(v_uncond, |c, &u| *c += w * (*c - u));
    Ok(out)
}

/// Acoustic strength: full from the start, quadratic decay after `t_decay`.
/// In joint mode this is the constant joint strength.
pub fn w_acoustic(t: f64, cfg: &GuidanceConfig) -> f64 {
    match cfg.mode {
        GuidanceMode::Joint => cfg.w,
        _ if t < cfg.t_decay => cfg.w_a_start,
        _ => cfg.w_a_start * (1.0 - t) * (1.0 - t),
    }
}

/// Linguistic strength. The linear ramp from zero over `[0, t_warm)` exists
/// only in `DecoupledAWarmup` mode; an empty ramp (`t_warm == 0`) is skipped.
pub fn w_linguistic(t: f64, cfg: &GuidanceConfig) -> f64 {
    match cfg.mode {
        GuidanceMode::Joint => cfg.w,
        _ if t >= cfg.t_decay => cfg.w_l_start * (1.0 - t) * (1.0 - t),
        GuidanceMode::DecoupledAWarmup if cfg.t_warm > 0.0 && t < cfg.t_warm => {
            cfg.w_l_start * t / cfg.t_warm
        }
        _ => cfg.w_l_start,
    }
}

/// `v_full + w_A(t) (v_full - v_text) + w_L(t) (v_text - v_uncond)`.
pub fn decoupled_cfg(triple: &FieldTriple, t: f64, cfg: &GuidanceConfig) -> Result<Array2<f64>> {
    guided_field(triple, w_acoustic(t, cfg), w_linguistic(t, cfg))
}

pub fn guided_field(triple: &FieldTriple, w_a: f64, w_l: f64) -> Result<Array2<f64>> {
    same_shape(&triple.v_full, &triple.v_text)?;
    same_shape(&triple.v_full, &triple.v_uncond)?;
    let mut out = triple.v_full.clone();
    ndarray::Zip::from(&mut out)
        .and(&triple.v_text)
        .and(&triple.v_uncond)
        .for_each(|f, &tx, &un| *f += w_a * (*f - tx) + w_l * (tx - un));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub t: f64,
    pub w_acoustic: f64,
    pub w_linguistic: f64,
}

/// One row per grid point.
pub fn schedule_dump(cfg: &GuidanceConfig, grid: &[f64]) -> Result<Vec<ScheduleRow>> {
    if cfg.mode == GuidanceMode::Joint {
        return Err(Error::JointModeSchedule);
    }
    Ok(grid
        .iter()
        .map(|&t| ScheduleRow {
            t,
            w_acoustic: w_acoustic(t, cfg),
            w_linguistic: w_linguistic(t, cfg),
        })
        .collect())
}

/// Decimal rendering with `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - mag).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    // rounding can carry into a new leading digit
    let digits: String = s.chars().filter(char::is_ascii_digit).collect();
    let digits = digits.trim_start_matches('0').len();
    if decimals > 0 && digits > sig {
        format!("{:.*}", decimals - 1, x)
    } else {
        s
    }
}

pub fn write_schedule_csv<W: Write>(mut w: W, rows: &[ScheduleRow]) -> Result<()> {
    writeln!(w, "t,w_acoustic,w_linguistic")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{}",
            format_sig(r.t, 9),
            format_sig(r.w_acoustic, 9),
            format_sig(r.w_linguistic, 9)
        )?;
    }
    Ok(())
}


#[cfg(test)]
mod props {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn cfg(w_a: f64, w_l: f64, t_warm: f64, t_decay: f64) -> GuidanceConfig {
        GuidanceConfig {
            w_a_start: w_a,
            w_l_start: w_l,
            t_warm,
            t_decay,
            ..GuidanceConfig::default()
        }
    }

    proptest! {
        #[test]
        fn strengths_stay_within_start(w_a in 0.0..10.0f64, w_l in 0.0..10.0f64, t_warm in 0.0..0.5f64, gap in 0.01..0.5f64, t in 0.0..=1.0f64) {
            let c = cfg(w_a, w_l, t_warm, t_warm + gap);
            let (a, l) = (w_acoustic(t, &c), w_linguistic(t, &c));
            prop_assert!((0.0..=w_a).contains(&a));
            prop_assert!((0.0..=w_l).contains(&l));
        }

        #[test]
        fn decay_is_monotone(w_a in 0.0..10.0f64, w_l in 0.0..10.0f64, t_decay in 0.1..1.0f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let c = cfg(w_a, w_l, 0.05, t_decay);
            let (lo, hi) = (t_decay + (1.0 - t_decay) * a.min(b), t_decay + (1.0 - t_decay) * a.max(b));
            prop_assert!(w_acoustic(hi, &c) <= w_acoustic(lo, &c));
            prop_assert!(w_linguistic(hi, &c) <= w_linguistic(lo, &c));
        }

        #[test]
        fn zero_weights_give_the_full_field(vals in proptest::collection::vec(-5.0..5.0f64, 6)) {
            let full = Array2::from_shape_vec((1, 2), vals[..2].to_vec()).unwrap();
            let text = Array2::from_shape_vec((1, 2), vals[2..4].to_vec()).unwrap();
            let uncond = Array2::from_shape_vec((1, 2), vals[4..].to_vec()).unwrap();
            let triple = FieldTriple { v_full: full.clone(), v_text: text, v_uncond: uncond };
            prop_assert_eq!(guided_field(&triple, 0.0, 0.0).unwrap(), full);
        }
    }
}

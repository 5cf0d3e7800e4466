//! Guided Euler sampling of the target region.

use ndarray::Array2;

use super::{Checkpoint, DropMode};
use crate::cfm::{euler_integrate, sway_time_grid, SolverConfig};
use crate::conditioning::LanguageId;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::guidance::{
    guided_field, joint_cfg, w_acoustic, w_linguistic, FieldTriple, GuidanceConfig, GuidanceMode,
};
use crate::infill::{Layout, Stage};
use crate::seed;

/// Transcript of the acoustic prompt, required by Stage-1 checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptText {
    pub ids: Vec<usize>,
    pub lid: LanguageId,
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub prompt: FeatureSequence,
    pub prompt_text: Option<PromptText>,
    pub target_ids: Vec<usize>,
    pub target_lid: LanguageId,
}

/// Target frame count: text-length ratio in Stage-1, `frames_per_token`
/// per token in Stage-2.
pub fn estimate_duration(
    stage: Stage,
    prompt_frames: usize,
    prompt_tokens: usize,
    target_tokens: usize,
    frames_per_token: usize,
) -> Result<usize> {
    if target_tokens == 0 {
        return Err(Error::Layout("empty target text".into()));
    }
    let t2 = match stage {
        Stage::S1 => {
            if prompt_tokens == 0 {
                return Err(Error::Layout("empty prompt text".into()));
            }
            (prompt_frames as f64 * target_tokens as f64 / prompt_tokens as f64).round() as usize
        }
        Stage::S2 => target_tokens * frames_per_token,
    };
    Ok(t2.max(1))
}

pub(super) fn request_layout(ckpt: &Checkpoint, req: &SampleRequest) -> Result<Layout> {
    let tau1 = req.prompt.len();
    let fpt = ckpt.net.dims.frames_per_token;
    match (ckpt.stage, &req.prompt_text) {
        (Stage::S1, Some(pt)) => {
            let tau2 = estimate_duration(Stage::S1, tau1, pt.ids.len(), req.target_ids.len(), fpt)?;
            Layout::stage1(&pt.ids, pt.lid, &req.target_ids, req.target_lid, tau1, tau2)
        }
        (Stage::S1, None) => Err(Error::Layout(
            "stage-1 checkpoint needs the prompt transcript".into(),
        )),
        (Stage::S2, None) => {
            let tau2 = estimate_duration(Stage::S2, tau1, 0, req.target_ids.len(), fpt)?;
            Layout::stage2(&req.target_ids, req.target_lid, tau1, tau2)
        }
        (Stage::S2, Some(_)) => Err(Error::Layout(
            "stage-2 checkpoint uses placeholder prompt text".into(),
        )),
    }
}

/// Generates the target region for `req`; prompt frames are not returned.
pub fn sample(
    ckpt: &Checkpoint,
    req: &SampleRequest,
    guidance: &GuidanceConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<FeatureSequence> {
    guidance.validate()?;
    let net = &ckpt.net;
    let layout = request_layout(ckpt, req)?;
    let frames: Vec<usize> = (layout.tau1..layout.tau()).collect();
    let full = net.context(&layout, &req.prompt, DropMode::Full, &frames)?;
    let text = net.context(&layout, &req.prompt, DropMode::TextOnly, &frames)?;
    let uncond = net.context(&layout, &req.prompt, DropMode::Uncond, &frames)?;
    let mut rng = seed::rng(seed, "sample.noise");
    let x0 = seed::standard_normal(&mut rng, layout.tau2, net.dims.feat);
    let grid = sway_time_grid(solver)?;
    let field = |x: &Array2<f64>, t: f64| -> Result<Array2<f64>> {
        let v_full = net.eval_context(&full, x.view(), t)?;
        let v_uncond = net.eval_context(&uncond, x.view(), t)?;
        if guidance.mode == GuidanceMode::Joint {
            return joint_cfg(&v_full, &v_uncond, guidance.w);
        }
        let v_text = net.eval_context(&text, x.view(), t)?;
        let triple = FieldTriple {
            v_full,
            v_text,
            v_uncond,
        };
        guided_field(&triple, w_acoustic(t, guidance), w_linguistic(t, guidance))
    };
    let x = euler_integrate(field, &x0, &grid)?;
    FeatureSequence::new(x, req.prompt.frame_rate_hz())
}

//! A frame-local conditional vector-field network with hand-derived gradients.
//!
//! Per frame the network reads
//! `[x_t | prompt frame | aligned text | prompt-audio mean | prompt-text mean | h_t]`
//! and applies `SiLU(affine) -> SiLU(affine) -> affine`, plus a linear skip
//! from the input to the output. That output is an endpoint estimate `d`;
//! the field is `(d - x_t) / max(1 - t, ENDPOINT_FLOOR)`, the exact
//! flow-matching field when `d = x_1`. Text embeddings pass through FiLM with the
//! textual LID sequence; `h_t` is the time embedding after the LID-aware
//! time projection.

mod checkpoint;
mod optim;
mod sample;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use optim::{AdamW, LrSchedule};
pub use sample::{estimate_duration, sample, PromptText, SampleRequest};
pub use train::{
    train_stage1, train_stage2, DropMode, DropSampler, TrainConfig, TrainLog, TrainPair,
    TrainUtterance,
};

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    film_coefficients, silu, silu_grad, time_embedding, time_preactivation, InjectionDims,
    InjectionParams, LanguageId,
};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::infill::Layout;
use crate::seed::standard_normal;

/// Lower bound on `1 - t` in the endpoint-to-field conversion.
pub const ENDPOINT_FLOOR: f64 = 0.05;

fn field_scale(t: f64) -> f64 {
    1.0 / (1.0 - t).max(ENDPOINT_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub feat: usize,
    pub d_time: usize,
    pub d_lid: usize,
    pub d_time_hidden: usize,
    pub d_text: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub lid_rows: usize,
    pub frames_per_token: usize,
    /// Time-level and textual LID injection enabled.
    pub dual_level: bool,
}

impl NetDims {
    pub fn toy(feat: usize, vocab: usize, languages: usize) -> Self {
        Self {
            feat,
            d_time: 32,
            d_lid: 16,
            d_time_hidden: 32,
            d_text: 32,
            hidden: 64,
            vocab,
            lid_rows: languages + 1,
            frames_per_token: 4,
            dual_level: true,
        }
    }

    pub fn input_width(&self) -> usize {
        3 * self.feat + 2 * self.d_text + self.d_time_hidden
    }

    fn injection(&self) -> InjectionDims {
        InjectionDims {
            d_time: self.d_time,
            d_lid: self.d_lid,
            d_hidden: self.d_time_hidden,
            d_text: self.d_text,
            lid_rows: self.lid_rows,
        }
    }

    // column offsets inside one input row
    fn col_cond(&self) -> usize {
        self.feat
    }
    fn col_text(&self) -> usize {
        2 * self.feat
    }
    fn col_audio_mean(&self) -> usize {
        2 * self.feat + self.d_text
    }
    fn col_text_mean(&self) -> usize {
        3 * self.feat + self.d_text
    }
    fn col_time(&self) -> usize {
        3 * self.feat + 2 * self.d_text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet {
    pub dims: NetDims,
    pub token_embedding: Array2<f64>,
    /// Replaces every text embedding when text is dropped.
    pub null_text: Array1<f64>,
    pub injection: InjectionParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w_skip: Array2<f64>,
}

pub const TENSOR_NAMES: [&str; 16] = [
    "token_embedding",
    "null_text",
    "injection.lid_embedding",
    "injection.time_weight",
    "injection.time_bias",
    "injection.film_gamma_weight",
    "injection.film_gamma_bias",
    "injection.film_beta_weight",
    "injection.film_beta_bias",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
    "mlp.w3",
    "mlp.b3",
    "mlp.w_skip",
];

fn row_view(v: &Array1<f64>) -> ArrayView2<'_, f64> {
    v.view().insert_axis(Axis(0))
}

fn row_view_mut(v: &mut Array1<f64>) -> ArrayViewMut2<'_, f64> {
    v.view_mut().insert_axis(Axis(0))
}

fn round_f32(a: Array2<f64>) -> Array2<f64> {
    a.mapv(|v| f64::from(v as f32))
}

impl FieldNet {
    /// Random init; values are f32-representable so checkpoints round-trip.
    /// LID pathways start as exact no-ops.
    pub fn init(dims: NetDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::sub_seed(seed, "field_net.init"));
        let inj = InjectionParams::init(&dims.injection(), &mut rng);
        let inj = InjectionParams {
            lid_embedding: round_f32(inj.lid_embedding),
            time_weight: round_f32(inj.time_weight),
            ..inj
        };
        let d_in = dims.input_width();
        let h = dims.hidden;
        let scaled = |rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64| {
            round_f32(standard_normal(rng, r, c) * s)
        };
        let token_embedding = scaled(&mut rng, dims.vocab, dims.d_text, 1.0);
        let null_text = scaled(&mut rng, 1, dims.d_text, 1.0).row(0).to_owned();
        let w1 = scaled(&mut rng, d_in, h, (1.0 / d_in as f64).sqrt());
        let w2 = scaled(&mut rng, h, h, (1.0 / h as f64).sqrt());
        let w3 = scaled(&mut rng, h, dims.feat, 0.1 * (1.0 / h as f64).sqrt());
        Self {
            dims,
            token_embedding,
            null_text,
            injection: inj,
            w1,
            b1: Array1::zeros(h),
            w2,
            b2: Array1::zeros(h),
            w3,
            b3: Array1::zeros(dims.feat),
            w_skip: Array2::zeros((d_in, dims.feat)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> [(&'static str, ArrayView2<'_, f64>); 16] {
        let i = &self.injection;
        let v = [
            self.token_embedding.view(),
            row_view(&self.null_text),
            i.lid_embedding.view(),
            i.time_weight.view(),
            row_view(&i.time_bias),
            i.film_gamma_weight.view(),
            row_view(&i.film_gamma_bias),
            i.film_beta_weight.view(),
            row_view(&i.film_beta_bias),
            self.w1.view(),
            row_view(&self.b1),
            self.w2.view(),
            row_view(&self.b2),
            self.w3.view(),
            row_view(&self.b3),
            self.w_skip.view(),
        ];
        let mut it = v.into_iter();
        TENSOR_NAMES.map(|n| (n, it.next().expect("16 tensors")))
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, ArrayViewMut2<'_, f64>); 16] {
        let i = &mut self.injection;
        let v = [
            self.token_embedding.view_mut(),
            row_view_mut(&mut self.null_text),
            i.lid_embedding.view_mut(),
            i.time_weight.view_mut(),
            row_view_mut(&mut i.time_bias),
            i.film_gamma_weight.view_mut(),
            row_view_mut(&mut i.film_gamma_bias),
            i.film_beta_weight.view_mut(),
            row_view_mut(&mut i.film_beta_bias),
            self.w1.view_mut(),
            row_view_mut(&mut self.b1),
            self.w2.view_mut(),
            row_view_mut(&mut self.b2),
            self.w3.view_mut(),
            row_view_mut(&mut self.b3),
            self.w_skip.view_mut(),
        ];
        let mut it = v.into_iter();
        TENSOR_NAMES.map(|n| (n, it.next().expect("16 tensors")))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy with LID injection switched off (parameters unchanged).
    pub fn without_injection(&self) -> Self {
        let mut n = self.clone();
        n.dims.dual_level = false;
        n
    }

    fn check_layout(&self, layout: &Layout, prompt: &FeatureSequence) -> Result<()> {
        if prompt.len() != layout.tau1 {
            return Err(Error::DimMismatch {
                what: "prompt frames",
                expected: layout.tau1,
                got: prompt.len(),
            });
        }
        if prompt.dim() != self.dims.feat {
            return Err(Error::DimMismatch {
                what: "feature dim",
                expected: self.dims.feat,
                got: prompt.dim(),
            });
        }
        let tau = layout.tau();
        if layout.z.len() != tau || layout.l.len() != tau || layout.align.len() != tau {
            return Err(Error::Layout(format!(
                "text/frame length mismatch for tau = {tau}"
            )));
        }
        if let Some(&bad) = layout.z.iter().find(|&&id| id >= self.dims.vocab) {
            return Err(Error::UnknownId(bad));
        }
        Ok(())
    }

    /// Conditioning inputs for the frames in `frames`, which do not change
    /// with `x_t` or `t`.
    fn context(
        &self,
        layout: &Layout,
        prompt: &FeatureSequence,
        drop: DropMode,
        frames: &[usize],
    ) -> Result<Context> {
        self.check_layout(layout, prompt)?;
        let d = self.dims;
        let tau1 = layout.tau1;
        let keep_audio = drop == DropMode::Full;
        let keep_text = drop != DropMode::Uncond;

        let film_on = d.dual_level && keep_text;
        let mut text = Array2::zeros((layout.tau(), d.d_text));
        if keep_text {
            for (p, &id) in layout.z.iter().enumerate() {
                text.row_mut(p).assign(&self.token_embedding.row(id));
            }
            if film_on {
                for (p, &lid) in layout.l.iter().enumerate() {
                    if lid != LanguageId::None {
                        let (g, b) =
                            film_coefficients(self.injection.lid_vector(lid)?, &self.injection);
                        let mut row = text.row_mut(p);
                        row *= &g;
                        row += &b;
                    }
                }
            }
        }

        let text_mean = if keep_text {
            let mut m = Array1::zeros(d.d_text);
            for u in 0..tau1 {
                m += &text.row(layout.align[u]);
            }
            m / tau1 as f64
        } else {
            self.null_text.clone()
        };
        let audio_mean = if keep_audio {
            prompt.mean_frame()
        } else {
            Array1::zeros(d.feat)
        };

        let width = d.input_width();
        let mut rows = Array2::zeros((frames.len(), width));
        for (i, &u) in frames.iter().enumerate() {
            let mut r = rows.row_mut(i);
            if keep_audio && u < tau1 {
                r.slice_mut(s![d.col_cond()..d.col_cond() + d.feat])
                    .assign(&prompt.frame(u));
            }
            let t_row = if keep_text {
                text.row(layout.align[u])
            } else {
                self.null_text.view()
            };
            r.slice_mut(s![d.col_text()..d.col_text() + d.d_text])
                .assign(&t_row);
            r.slice_mut(s![d.col_audio_mean()..d.col_audio_mean() + d.feat])
                .assign(&audio_mean);
            r.slice_mut(s![d.col_text_mean()..d.col_text_mean() + d.d_text])
                .assign(&text_mean);
        }

        let time_lid = if !d.dual_level {
            None
        } else if drop == DropMode::Uncond {
            Some(LanguageId::Unknown)
        } else {
            Some(layout.time_lid)
        };
        Ok(Context {
            drop,
            frames: frames.to_vec(),
            rows,
            time_lid,
            film_on,
        })
    }

    fn time_features(
        &self,
        t: f64,
        lid: Option<LanguageId>,
    ) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
        let e_t = time_embedding(t, self.dims.d_time);
        let e_l = match lid {
            Some(l) => Some(self.injection.lid_vector(l)?),
            None => None,
        };
        let pre = time_preactivation(e_t.view(), e_l, &self.injection)?;
        let h = pre.mapv(silu);
        Ok((e_t, pre, h))
    }

    fn fill_inputs(
        &self,
        ctx: &Context,
        x_rows: ArrayView2<f64>,
        h_t: &Array1<f64>,
    ) -> Array2<f64> {
        let d = self.dims;
        let mut x = ctx.rows.clone();
        x.slice_mut(s![.., ..d.feat]).assign(&x_rows);
        x.slice_mut(s![.., d.col_time()..]).assign(
            &h_t.broadcast((ctx.frames.len(), d.d_time_hidden))
                .expect("row broadcast"),
        );
        x
    }

    fn mlp(&self, x: Array2<f64>) -> MlpTape {
        let a1 = x.dot(&self.w1) + &self.b1;
        let h1 = a1.mapv(silu);
        let a2 = h1.dot(&self.w2) + &self.b2;
        let h2 = a2.mapv(silu);
        let out = h2.dot(&self.w3) + &self.b3 + x.dot(&self.w_skip);
        MlpTape {
            x,
            a1,
            h1,
            a2,
            h2,
            out,
        }
    }

    /// Accumulates MLP parameter gradients; returns the input gradient.
    fn mlp_backward(&self, tape: &MlpTape, d_out: &Array2<f64>, g: &mut FieldNet) -> Array2<f64> {
        g.w3 += &tape.h2.t().dot(d_out);
        g.b3 += &d_out.sum_axis(Axis(0));
        g.w_skip += &tape.x.t().dot(d_out);
        let mut d_a2 = d_out.dot(&self.w3.t());
        d_a2.zip_mut_with(&tape.a2, |g, &a| *g *= silu_grad(a));
        g.w2 += &tape.h1.t().dot(&d_a2);
        g.b2 += &d_a2.sum_axis(Axis(0));
        let mut d_a1 = d_a2.dot(&self.w2.t());
        d_a1.zip_mut_with(&tape.a1, |g, &a| *g *= silu_grad(a));
        g.w1 += &tape.x.t().dot(&d_a1);
        g.b1 += &d_a1.sum_axis(Axis(0));
        d_a1.dot(&self.w1.t()) + d_out.dot(&self.w_skip.t())
    }

    /// Field prediction for every frame of `x_t` (`tau x D`).
    pub fn forward(
        &self,
        x_t: &FeatureSequence,
        t: f64,
        cond: &ConditionBundle<'_>,
    ) -> Result<FeatureSequence> {
        if x_t.len() != cond.layout.tau() {
            return Err(Error::DimMismatch {
                what: "x_t frames",
                expected: cond.layout.tau(),
                got: x_t.len(),
            });
        }
        if x_t.dim() != self.dims.feat {
            return Err(Error::DimMismatch {
                what: "feature dim",
                expected: self.dims.feat,
                got: x_t.dim(),
            });
        }
        let frames: Vec<usize> = (0..x_t.len()).collect();
        let ctx = self.context(cond.layout, cond.prompt, cond.drop, &frames)?;
        let out = self.eval_context(&ctx, x_t.frames().view(), t)?;
        FeatureSequence::new(out, x_t.frame_rate_hz())
    }

    fn eval_context(&self, ctx: &Context, x_rows: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let (_, _, h) = self.time_features(t, ctx.time_lid)?;
        let d = self.mlp(self.fill_inputs(ctx, x_rows, &h)).out;
        Ok((d - x_rows) * field_scale(t))
    }

    /// Mean squared flow-matching error over the target frames of `items`,
    /// pooled across the batch.
    pub fn batch_loss(&self, items: &[TrainItem<'_>]) -> Result<f64> {
        Ok(self.run_batch(items, false)?.0)
    }

    pub fn loss_and_grad(&self, items: &[TrainItem<'_>]) -> Result<(f64, FieldNet)> {
        let (loss, g) = self.run_batch(items, true)?;
        let g = g.expect("gradients requested");
        for (name, t) in g.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    path: name.to_string(),
                });
            }
        }
        Ok((loss, g))
    }

    fn run_batch(
        &self,
        items: &[TrainItem<'_>],
        want_grad: bool,
    ) -> Result<(f64, Option<FieldNet>)> {
        let d = self.dims;
        let mut contexts = Vec::with_capacity(items.len());
        let mut xs = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        let mut times = Vec::with_capacity(items.len());
        let mut x_ts = Vec::with_capacity(items.len());
        let mut scales = Vec::new();
        for it in items {
            let lay = it.layout;
            if it.target.len() != lay.tau2 || it.x0.dim() != (lay.tau2, d.feat) {
                return Err(Error::DimMismatch {
                    what: "target frames",
                    expected: lay.tau2,
                    got: it.target.len(),
                });
            }
            let frames: Vec<usize> = (lay.tau1..lay.tau()).collect();
            let ctx = self.context(lay, it.prompt, it.drop, &frames)?;
            let x_t = &it.x0 * (1.0 - it.t) + it.target.frames() * it.t;
            let tf = self.time_features(it.t, ctx.time_lid)?;
            xs.push(self.fill_inputs(&ctx, x_t.view(), &tf.2));
            scales.extend(std::iter::repeat_n(field_scale(it.t), frames.len()));
            x_ts.push(x_t);
            targets.push(it.target.frames() - &it.x0);
            contexts.push(ctx);
            times.push(tf);
        }
        let total_frames: usize = contexts.iter().map(|c| c.frames.len()).sum();
        if total_frames == 0 {
            return Err(Error::EmptyLossRegion);
        }
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Layout(e.to_string()))?;
        let tgt_views: Vec<_> = targets.iter().map(|x| x.view()).collect();
        let target =
            ndarray::concatenate(Axis(0), &tgt_views).map_err(|e| Error::Layout(e.to_string()))?;
        let xt_views: Vec<_> = x_ts.iter().map(|x| x.view()).collect();
        let x_t =
            ndarray::concatenate(Axis(0), &xt_views).map_err(|e| Error::Layout(e.to_string()))?;
        let scale = Array1::from(scales).insert_axis(Axis(1));
        let tape = self.mlp(x);
        let err = (&tape.out - &x_t) * &scale - &target;
        let count = (total_frames * d.feat) as f64;
        let loss = err.iter().map(|e| e * e).sum::<f64>() / count;
        if !want_grad {
            return Ok((loss, None));
        }

        let mut g = self.zeros_like();
        let d_out = err * &scale * (2.0 / count);
        let d_x = self.mlp_backward(&tape, &d_out, &mut g);
        let mut offset = 0;
        for ((it, ctx), (e_t, pre, _)) in items.iter().zip(&contexts).zip(&times) {
            let n = ctx.frames.len();
            let dx = d_x.slice(s![offset..offset + n, ..]);
            offset += n;
            self.backward_time(
                ctx,
                e_t,
                pre,
                dx.slice(s![.., d.col_time()..]).sum_axis(Axis(0)),
                &mut g,
            )?;
            self.backward_text(it.layout, ctx, dx, &mut g)?;
        }
        Ok((loss, Some(g)))
    }

    fn backward_time(
        &self,
        ctx: &Context,
        e_t: &Array1<f64>,
        pre: &Array1<f64>,
        d_h: Array1<f64>,
        g: &mut FieldNet,
    ) -> Result<()> {
        let d_t = self.dims.d_time;
        let d_pre = &d_h * &pre.mapv(silu_grad);
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view()
                .insert_axis(Axis(1))
                .dot(&b.view().insert_axis(Axis(0)))
        };
        {
            let mut top = g.injection.time_weight.slice_mut(s![..d_t, ..]);
            top += &outer(e_t, &d_pre);
        }
        g.injection.time_bias += &d_pre;
        if let Some(lid) = ctx.time_lid {
            let row = lid.table_row().expect("time LID is never NONE");
            let e_l = self.injection.lid_vector(lid)?.to_owned();
            let mut bot = g.injection.time_weight.slice_mut(s![d_t.., ..]);
            bot += &outer(&e_l, &d_pre);
            let d_el = self.injection.time_weight.slice(s![d_t.., ..]).dot(&d_pre);
            let mut r = g.injection.lid_embedding.row_mut(row);
            r += &d_el;
        }
        Ok(())
    }

    fn backward_text(
        &self,
        layout: &Layout,
        ctx: &Context,
        dx: ArrayView2<f64>,
        g: &mut FieldNet,
    ) -> Result<()> {
        let d = self.dims;
        let d_text = dx.slice(s![.., d.col_text()..d.col_text() + d.d_text]);
        let d_mean = dx
            .slice(s![.., d.col_text_mean()..d.col_text_mean() + d.d_text])
            .sum_axis(Axis(0));
        if ctx.drop == DropMode::Uncond {
            g.null_text += &d_text.sum_axis(Axis(0));
            g.null_text += &d_mean;
            return Ok(());
        }
        // gradient w.r.t. each (post-FiLM) text position
        let mut d_pos: Vec<Option<Array1<f64>>> = vec![None; layout.tau()];
        let mut add = |p: usize, v: ArrayView2<f64>, row: usize, scale: f64| {
            let slot = d_pos[p].get_or_insert_with(|| Array1::zeros(d.d_text));
            slot.scaled_add(scale, &v.row(row));
        };
        for (i, &u) in ctx.frames.iter().enumerate() {
            add(layout.align[u], d_text, i, 1.0);
        }
        let mean_row = d_mean.view().insert_axis(Axis(0));
        let inv = 1.0 / layout.tau1 as f64;
        for u in 0..layout.tau1 {
            add(layout.align[u], mean_row, 0, inv);
        }
        for (p, grad) in d_pos.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = layout.z[p];
            let lid = layout.l[p];
            if ctx.film_on && lid != LanguageId::None {
                let e_l = self.injection.lid_vector(lid)?.to_owned();
                let (gamma, _) = film_coefficients(e_l.view(), &self.injection);
                let raw = self.token_embedding.row(id);
                let d_gamma = &grad * &raw;
                let mut tok = g.token_embedding.row_mut(id);
                tok += &(&grad * &gamma);
                let outer = |b: &Array1<f64>| {
                    e_l.view()
                        .insert_axis(Axis(1))
                        .dot(&b.view().insert_axis(Axis(0)))
                };
                g.injection.film_gamma_weight += &outer(&d_gamma);
                g.injection.film_gamma_bias += &d_gamma;
                g.injection.film_beta_weight += &outer(&grad);
                g.injection.film_beta_bias += &grad;
                let d_el = self.injection.film_gamma_weight.dot(&d_gamma)
                    + self.injection.film_beta_weight.dot(&grad);
                let mut r = g
                    .injection
                    .lid_embedding
                    .row_mut(lid.table_row().expect("not NONE"));
                r += &d_el;
            } else {
                let mut tok = g.token_embedding.row_mut(id);
                tok += &grad;
            }
        }
        Ok(())
    }
}

struct MlpTape {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

struct Context {
    drop: DropMode,
    frames: Vec<usize>,
    rows: Array2<f64>,
    time_lid: Option<LanguageId>,
    film_on: bool,
}

/// Acoustic prompt, text layout and language ids for one item, plus which
/// conditions are dropped.
#[derive(Debug, Clone, Copy)]
pub struct ConditionBundle<'a> {
    pub layout: &'a Layout,
    pub prompt: &'a FeatureSequence,
    pub drop: DropMode,
}

/// One training example at a fixed time and noise draw.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub layout: &'a Layout,
    pub prompt: &'a FeatureSequence,
    pub target: &'a FeatureSequence,
    pub x0: Array2<f64>,
    pub t: f64,
    pub drop: DropMode,
}

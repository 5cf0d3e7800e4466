//! Language-ID injection at two levels: concatenated with the time embedding
//! ahead of a SiLU projection, and as FiLM modulation of text embeddings.
//!
//! Fresh parameters make both paths exact no-ops: the LID rows of the time
//! projection are zero, the FiLM scale map yields 1 and the shift map yields 0.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `NONE` never reaches an embedding lookup; `Unknown` owns row 0 of the
/// table and language `i` owns row `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LanguageId {
    None,
    Unknown,
    Lang(u16),
}

impl LanguageId {
    pub fn table_row(self) -> Option<usize> {
        match self {
            LanguageId::None => None,
            LanguageId::Unknown => Some(0),
            LanguageId::Lang(i) => Some(i as usize + 1),
        }
    }
}

/// Ordered language codes; position is the language index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTable {
    codes: Vec<String>,
}

impl LanguageTable {
    pub fn new<S: Into<String>>(codes: impl IntoIterator<Item = S>) -> Result<Self> {
        let codes: Vec<String> = codes.into_iter().map(Into::into).collect();
        for (i, c) in codes.iter().enumerate() {
            if codes[..i].contains(c) {
                return Err(Error::Config(format!("duplicate language code {c:?}")));
            }
        }
        Ok(Self { codes })
    }

    pub fn id(&self, code: &str) -> Result<LanguageId> {
        self.codes
            .iter()
            .position(|c| c == code)
            .map(|i| LanguageId::Lang(i as u16))
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn code(&self, id: LanguageId) -> &str {
        match id {
            LanguageId::None => "<none>",
            LanguageId::Unknown => "<unk>",
            LanguageId::Lang(i) => &self.codes[i as usize],
        }
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Embedding rows needed: one per language plus `Unknown`.
    pub fn table_rows(&self) -> usize {
        self.codes.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionDims {
    pub d_time: usize,
    pub d_lid: usize,
    pub d_hidden: usize,
    pub d_text: usize,
    pub lid_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionParams {
    pub lid_embedding: Array2<f64>,
    /// `(d_time + d_lid) x d_hidden`; the last `d_lid` rows act on the LID.
    pub time_weight: Array2<f64>,
    pub time_bias: Array1<f64>,
    pub film_gamma_weight: Array2<f64>,
    pub film_gamma_bias: Array1<f64>,
    pub film_beta_weight: Array2<f64>,
    pub film_beta_bias: Array1<f64>,
}

impl InjectionParams {
    pub fn init(dims: &InjectionDims, rng: &mut ChaCha8Rng) -> Self {
        let lid_embedding = crate::seed::standard_normal(rng, dims.lid_rows, dims.d_lid);
        let mut time_weight = Array2::zeros((dims.d_time + dims.d_lid, dims.d_hidden));
        let scale = (1.0 / dims.d_time as f64).sqrt();
        let top = crate::seed::standard_normal(rng, dims.d_time, dims.d_hidden) * scale;
        time_weight.slice_mut(s![..dims.d_time, ..]).assign(&top);
        Self {
            lid_embedding,
            time_weight,
            time_bias: Array1::zeros(dims.d_hidden),
            film_gamma_weight: Array2::zeros((dims.d_lid, dims.d_text)),
            film_gamma_bias: Array1::ones(dims.d_text),
            film_beta_weight: Array2::zeros((dims.d_lid, dims.d_text)),
            film_beta_bias: Array1::zeros(dims.d_text),
        }
    }

    pub fn d_time(&self) -> usize {
        self.time_weight.nrows() - self.lid_embedding.ncols()
    }

    pub fn d_text(&self) -> usize {
        self.film_gamma_bias.len()
    }

    pub fn lid_vector(&self, lid: LanguageId) -> Result<ArrayView1<'_, f64>> {
        let row = lid
            .table_row()
            .ok_or_else(|| Error::Layout("NONE has no embedding".into()))?;
        if row >= self.lid_embedding.nrows() {
            return Err(Error::DimMismatch {
                what: "lid table rows",
                expected: self.lid_embedding.nrows(),
                got: row + 1,
            });
        }
        Ok(self.lid_embedding.row(row))
    }

    /// True when every LID-dependent pathway is still at its no-op value.
    pub fn is_noop(&self) -> bool {
        let d_t = self.d_time();
        self.time_weight
            .slice(s![d_t.., ..])
            .iter()
            .all(|&v| v == 0.0)
            && self.film_gamma_weight.iter().all(|&v| v == 0.0)
            && self.film_gamma_bias.iter().all(|&v| v == 1.0)
            && self.film_beta_weight.iter().all(|&v| v == 0.0)
            && self.film_beta_bias.iter().all(|&v| v == 0.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `x * sigmoid(x)`.
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of `t` in `[0, 1]`, half sines then half cosines,
/// frequencies spaced geometrically from 0.25 to 8 cycles per unit time.
pub fn time_embedding(t: f64, d_time: usize) -> Array1<f64> {
    let half = d_time / 2;
    let mut e = Array1::zeros(d_time);
    for i in 0..half {
        let f = if half > 1 {
            0.25 * 32f64.powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let arg = std::f64::consts::TAU * f * t;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

/// Pre-activation of the time projection. With `lid == None` the LID slice is
/// skipped entirely, which is what an injection-free model computes.
pub fn time_preactivation(
    e_t: ArrayView1<f64>,
    lid: Option<ArrayView1<f64>>,
    params: &InjectionParams,
) -> Result<Array1<f64>> {
    let d_t = params.d_time();
    if e_t.len() != d_t {
        return Err(Error::DimMismatch {
            what: "time embedding",
            expected: d_t,
            got: e_t.len(),
        });
    }
    let mut pre = e_t.dot(&params.time_weight.slice(s![..d_t, ..]));
    if let Some(e_l) = lid {
        pre += &e_l.dot(&params.time_weight.slice(s![d_t.., ..]));
    }
    pre += &params.time_bias;
    Ok(pre)
}

/// `SiLU(W [e_t ; e_L] + b)`.
pub fn inject_time(
    e_t: ArrayView1<f64>,
    lid: LanguageId,
    params: &InjectionParams,
) -> Result<Array1<f64>> {
    if lid == LanguageId::None {
        return Err(Error::Layout(
            "time-level injection requires a language".into(),
        ));
    }
    let e_l = params.lid_vector(lid)?;
    Ok(time_preactivation(e_t, Some(e_l), params)?.mapv(silu))
}

/// FiLM scale and shift for one LID embedding.
pub fn film_coefficients(
    e_l: ArrayView1<f64>,
    params: &InjectionParams,
) -> (Array1<f64>, Array1<f64>) {
    let gamma = e_l.dot(&params.film_gamma_weight) + &params.film_gamma_bias;
    let beta = e_l.dot(&params.film_beta_weight) + &params.film_beta_bias;
    (gamma, beta)
}

/// `gamma(e_L) * e_T + beta(e_L)`; `NONE` returns `e_T` untouched.
pub fn film_modulate(
    e_text: ArrayView1<f64>,
    lid: LanguageId,
    params: &InjectionParams,
) -> Result<Array1<f64>> {
    if e_text.len() != params.d_text() {
        return Err(Error::DimMismatch {
            what: "text embedding",
            expected: params.d_text(),
            got: e_text.len(),
        });
    }
    if lid == LanguageId::None {
        return Ok(e_text.to_owned());
    }
    let (gamma, beta) = film_coefficients(params.lid_vector(lid)?, params);
    Ok(&gamma * &e_text + &beta)
}

pub fn film_sequence(
    text: &Array2<f64>,
    lids: &[LanguageId],
    params: &InjectionParams,
) -> Result<Array2<f64>> {
    if text.nrows() != lids.len() {
        return Err(Error::DimMismatch {
            what: "lid sequence",
            expected: text.nrows(),
            got: lids.len(),
        });
    }
    let mut out = text.clone();
    for (p, &lid) in lids.iter().enumerate() {
        if lid != LanguageId::None {
            let row = film_modulate(text.row(p), lid, params)?;
            out.row_mut(p).assign(&row);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn dims() -> InjectionDims {
        InjectionDims {
            d_time: 32,
            d_lid: 16,
            d_hidden: 32,
            d_text: 32,
            lid_rows: 4,
        }
    }

    fn fresh() -> InjectionParams {
        InjectionParams::init(&dims(), &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn fresh_params_are_noop() {
        let p = fresh();
        assert!(p.is_noop());
        let e_t = time_embedding(0.37, 32);
        let a = inject_time(e_t.view(), LanguageId::Lang(0), &p).unwrap();
        let b = inject_time(e_t.view(), LanguageId::Lang(2), &p).unwrap();
        let bare = time_preactivation(e_t.view(), None, &p).unwrap().mapv(silu);
        assert_eq!(a, b);
        assert_eq!(a, bare);
    }

    #[test]
    fn inject_zero_input() {
        let mut p = fresh();
        p.lid_embedding.fill(0.0);
        let h = inject_time(Array1::zeros(32).view(), LanguageId::Unknown, &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inject_scalar_case() {
        let p = InjectionParams {
            lid_embedding: array![[2.0]],
            time_weight: array![[1.0], [1.0]],
            time_bias: array![0.0],
            film_gamma_weight: array![[0.0]],
            film_gamma_bias: array![1.0],
            film_beta_weight: array![[0.0]],
            film_beta_bias: array![0.0],
        };
        let h = inject_time(array![1.0].view(), LanguageId::Unknown, &p).unwrap();
        let want = 3.0 * sigmoid(3.0);
        assert!((h[0] - want).abs() < 1e-15);
        assert!((h[0] - 2.8577).abs() < 1e-4);
        assert!(inject_time(array![1.0].view(), LanguageId::None, &p).is_err());
        assert!(inject_time(array![1.0, 2.0].view(), LanguageId::Unknown, &p).is_err());
    }

    fn film_params() -> InjectionParams {
        // gamma = (0.5, 2), beta = (1, -1) for the Unknown row
        InjectionParams {
            lid_embedding: array![[1.0]],
            time_weight: array![[0.0, 0.0], [0.0, 0.0]],
            time_bias: array![0.0, 0.0],
            film_gamma_weight: array![[0.5, 1.0]],
            film_gamma_bias: array![0.0, 1.0],
            film_beta_weight: array![[1.0, -1.0]],
            film_beta_bias: array![0.0, 0.0],
        }
    }

    #[test]
    fn film_hand_case() {
        let p = film_params();
        let out = film_modulate(array![2.0, 3.0].view(), LanguageId::Unknown, &p).unwrap();
        assert_eq!(out, array![2.0, 5.0]);
        let same = film_modulate(array![2.0, 3.0].view(), LanguageId::None, &p).unwrap();
        assert_eq!(same, array![2.0, 3.0]);
    }

    #[test]
    fn film_none_skips_lookup() {
        // an empty table would fail any lookup
        let mut p = film_params();
        p.lid_embedding = Array2::zeros((0, 1));
        assert!(film_modulate(array![1.0, 1.0].view(), LanguageId::None, &p).is_ok());
        assert!(film_modulate(array![1.0, 1.0].view(), LanguageId::Unknown, &p).is_err());
    }

    #[test]
    fn film_sequence_composes() {
        let mut p = fresh();
        p.film_gamma_weight.fill(0.1);
        p.film_beta_weight.fill(-0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let text = crate::seed::standard_normal(&mut rng, 3, 32);
        let lids = [LanguageId::None, LanguageId::Unknown, LanguageId::Lang(1)];
        let out = film_sequence(&text, &lids, &p).unwrap();
        for (i, &l) in lids.iter().enumerate() {
            assert_eq!(out.row(i), film_modulate(text.row(i), l, &p).unwrap());
        }
        assert_eq!(out.row(0), text.row(0));
        let all_none = film_sequence(&text, &[LanguageId::None; 3], &p).unwrap();
        assert_eq!(all_none, text);
        assert!(film_sequence(&text, &lids[..2], &p).is_err());
    }

    #[test]
    fn film_is_affine_in_text() {
        let mut p = fresh();
        p.film_gamma_weight.fill(0.3);
        p.film_beta_weight.fill(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::seed::standard_normal(&mut rng, 1, 32)
            .row(0)
            .to_owned();
        let y = crate::seed::standard_normal(&mut rng, 1, 32)
            .row(0)
            .to_owned();
        let lid = LanguageId::Lang(0);
        let f = |v: &Array1<f64>| film_modulate(v.view(), lid, &p).unwrap();
        let f0 = f(&Array1::zeros(32));
        let (a, b) = (1.7, -0.4);
        let lhs = f(&(&x * a + &y * b)) - &f0;
        let rhs = (f(&x) - &f0) * a + (f(&y) - &f0) * b;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn lid_columns_decide_invariance() {
        let mut p = fresh();
        let e_t = time_embedding(0.5, 32);
        p.time_weight[[40, 3]] = 0.5;
        let a = inject_time(e_t.view(), LanguageId::Lang(0), &p).unwrap();
        let b = inject_time(e_t.view(), LanguageId::Lang(1), &p).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn silu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.8, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn table_lookup() {
        let t = LanguageTable::new(["toyA", "toyB"]).unwrap();
        assert_eq!(t.id("toyB").unwrap(), LanguageId::Lang(1));
        assert!(t.id("xx").is_err());
        assert_eq!(t.table_rows(), 3);
        assert!(LanguageTable::new(["a", "a"]).is_err());
    }
}

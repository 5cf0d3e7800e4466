//! Linear probability path, flow-matching regression loss, and Euler sampling
//! over a sway-warped time grid.

use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub x_t: FeatureSequence,
}

/// `(1 - t) * x0 + t * x1`.
pub fn interpolate_path(x0: &FeatureSequence, x1: &FeatureSequence, t: f64) -> Result<PathPoint> {
    x0.check_same_shape(x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            name: "t",
            value: t,
            range: "[0, 1]",
        });
    }
    let frames = x0.frames() * (1.0 - t) + x1.frames() * t;
    Ok(PathPoint {
        t,
        x_t: FeatureSequence::new(frames, x1.frame_rate_hz())?,
    })
}

/// The constant velocity `x1 - x0` of the linear path.
pub fn target_field(x0: &FeatureSequence, x1: &FeatureSequence) -> Result<FeatureSequence> {
    x0.check_same_shape(x1)?;
    FeatureSequence::new(x1.frames() - x0.frames(), x1.frame_rate_hz())
}

/// Mean squared error between `predicted` and `x1 - x0` over the frames
/// where `mask` is nonzero (all frames when `mask` is `None`).
pub fn cfm_loss(
    predicted: &FeatureSequence,
    x0: &FeatureSequence,
    x1: &FeatureSequence,
    mask: Option<&[u8]>,
) -> Result<f64> {
    predicted.check_same_shape(x0)?;
    x0.check_same_shape(x1)?;
    let (t, d) = predicted.shape();
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::DimMismatch {
                what: "loss mask",
                expected: t,
                got: m.len(),
            });
        }
    }
    let mut sum = 0.0;
    let mut frames = 0usize;
    for u in 0..t {
        if mask.is_some_and(|m| m[u] == 0) {
            continue;
        }
        frames += 1;
        let (p, a, b) = (predicted.frame(u), x0.frame(u), x1.frame(u));
        for k in 0..d {
            let e = p[k] - (b[k] - a[k]);
            sum += e * e;
        }
    }
    if frames == 0 {
        return Err(Error::EmptyLossRegion);
    }
    Ok(sum / (frames * d) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub nfe: usize,
    pub sway_coefficient: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            nfe: 16,
            sway_coefficient: -1.0,
        }
    }
}

/// Uniform grid `u_k = k / nfe` warped by `u + s (cos(pi u / 2) - 1 + u)`.
///
/// Endpoints are pinned to exactly 0 and 1.
pub fn sway_time_grid(config: &SolverConfig) -> Result<Vec<f64>> {
    let s = config.sway_coefficient;
    if config.nfe == 0 {
        return Err(Error::Config("nfe must be at least 1".into()));
    }
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::OutOfRange {
            name: "sway_coefficient",
            value: s,
            range: "[-1, 1]",
        });
    }
    let n = config.nfe;
    let mut grid: Vec<f64> = (0..=n)
        .map(|k| {
            let u = k as f64 / n as f64;
            if s == 0.0 {
                u
            } else {
                u + s * ((FRAC_PI_2 * u).cos() - 1.0 + u)
            }
        })
        .collect();
    grid[0] = 0.0;
    grid[n] = 1.0;
    Ok(grid)
}

/// Explicit Euler over an arbitrary increasing grid; the field is evaluated
/// at the left end of each interval.
pub fn euler_integrate<F>(mut field: F, x0: &Array2<f64>, grid: &[f64]) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    let mut x = x0.clone();
    for (step, w) in grid.windows(2).enumerate() {
        let v = field(&x, w[0])?;
        if v.dim() != x.dim() {
            return Err(Error::ShapeMismatch {
                left: x.dim(),
                right: v.dim(),
            });
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteField { step });
        }
        x.scaled_add(w[1] - w[0], &v);
    }
    Ok(x)
}

pub fn euler_sample<F>(
    field: F,
    x0: &FeatureSequence,
    config: &SolverConfig,
) -> Result<FeatureSequence>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    let grid = sway_time_grid(config)?;
    let x = euler_integrate(field, x0.frames(), &grid)?;
    FeatureSequence::new(x, x0.frame_rate_hz())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(v: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(v, 25.0).unwrap()
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let x0 = seq(array![[0.0, 0.0]]);
        let x1 = seq(array![[2.0, 4.0]]);
        assert_eq!(interpolate_path(&x0, &x1, 0.0).unwrap().x_t, x0);
        assert_eq!(interpolate_path(&x0, &x1, 1.0).unwrap().x_t, x1);
        let p = interpolate_path(&x0, &x1, 0.25).unwrap();
        assert_eq!(p.x_t.frames(), &array![[0.5, 1.0]]);
    }

    #[test]
    fn path_errors() {
        let x0 = seq(array![[0.0, 0.0]]);
        let x1 = seq(array![[2.0, 4.0, 1.0]]);
        match interpolate_path(&x0, &x1, 0.5) {
            Err(Error::ShapeMismatch { left, right }) => {
                assert_eq!(left, (1, 2));
                assert_eq!(right, (1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            interpolate_path(&x0, &x0, 1.5),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn target_field_cases() {
        let a = seq(array![[0.0, 0.0]]);
        let b = seq(array![[2.0, 4.0]]);
        assert_eq!(target_field(&a, &b).unwrap().frames(), &array![[2.0, 4.0]]);
        assert!(target_field(&a, &a)
            .unwrap()
            .frames()
            .iter()
            .all(|&v| v == 0.0));
        let ab = target_field(&a, &b).unwrap();
        let ba = target_field(&b, &a).unwrap();
        assert_eq!(ab.frames(), &(-ba.frames()));
    }

    #[test]
    fn loss_cases() {
        let x0 = seq(array![[0.0, 1.0], [2.0, 3.0]]);
        let x1 = seq(array![[1.0, 1.0], [0.0, 5.0]]);
        let perfect = target_field(&x0, &x1).unwrap();
        assert_eq!(cfm_loss(&perfect, &x0, &x1, None).unwrap(), 0.0);
        let off = seq(perfect.frames() + 1.0);
        assert_eq!(cfm_loss(&off, &x0, &x1, None).unwrap(), 1.0);
        assert!(matches!(
            cfm_loss(&off, &x0, &x1, Some(&[0, 0])),
            Err(Error::EmptyLossRegion)
        ));
    }

    #[test]
    fn masked_loss_matches_brute_force() {
        // frame 0 has error 1 everywhere, frame 1..4 error 3
        let x0 = seq(Array2::zeros((4, 2)));
        let x1 = seq(Array2::zeros((4, 2)));
        let mut p = Array2::from_elem((4, 2), 3.0);
        p.row_mut(0).fill(1.0);
        let p = seq(p);
        let mask = [1u8, 1, 0, 0];
        let mut brute = 0.0;
        let mut n = 0.0;
        for (u, &m) in mask.iter().enumerate() {
            if m == 1 {
                for k in 0..2 {
                    brute += p.frames()[[u, k]].powi(2);
                    n += 1.0;
                }
            }
        }
        assert_eq!(cfm_loss(&p, &x0, &x1, Some(&mask)).unwrap(), brute / n);
        assert_eq!(brute / n, 5.0);
    }

    #[test]
    fn sway_grid_properties() {
        let uni = sway_time_grid(&SolverConfig {
            nfe: 16,
            sway_coefficient: 0.0,
        })
        .unwrap();
        for (k, t) in uni.iter().enumerate() {
            assert_eq!(*t, k as f64 / 16.0);
        }
        let g = sway_time_grid(&SolverConfig {
            nfe: 2,
            sway_coefficient: -1.0,
        })
        .unwrap();
        assert!((g[1] - (1.0 - (std::f64::consts::PI / 4.0).cos())).abs() < 1e-15);
        assert!((g[1] - 0.2928932).abs() < 1e-7);
        for s in [-1.0, -0.5, 0.3, 1.0] {
            let g = sway_time_grid(&SolverConfig {
                nfe: 9,
                sway_coefficient: s,
            })
            .unwrap();
            assert_eq!(g[0], 0.0);
            assert_eq!(g[9], 1.0);
            assert!(g.windows(2).all(|w| w[1] > w[0]));
        }
        assert!(sway_time_grid(&SolverConfig {
            nfe: 4,
            sway_coefficient: -1.5
        })
        .is_err());
        assert!(sway_time_grid(&SolverConfig {
            nfe: 0,
            sway_coefficient: 0.0
        })
        .is_err());
    }

    #[test]
    fn negative_sway_front_loads() {
        let g = sway_time_grid(&SolverConfig::default()).unwrap();
        for (k, t) in g.iter().enumerate().skip(1).take(15) {
            assert!(*t <= k as f64 / 16.0);
        }
    }

    #[test]
    fn euler_constant_and_zero_fields() {
        let x0 = seq(array![[0.5, -1.0], [2.0, 0.0]]);
        let c = array![[1.0, 2.0], [-3.0, 0.5]];
        for nfe in [1, 7, 16] {
            let cfg = SolverConfig {
                nfe,
                sway_coefficient: -1.0,
            };
            let out = euler_sample(|_, _| Ok(c.clone()), &x0, &cfg).unwrap();
            let want = x0.frames() + &c;
            for (a, b) in out.frames().iter().zip(want.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let z = euler_sample(|x, _| Ok(Array2::zeros(x.dim())), &x0, &cfg).unwrap();
            assert_eq!(z, x0);
        }
    }

    #[test]
    fn euler_reports_failing_step() {
        let x0 = seq(array![[1.0]]);
        let cfg = SolverConfig {
            nfe: 8,
            sway_coefficient: 0.0,
        };
        let r = euler_sample(
            |x, t| {
                Ok(if t >= 0.5 {
                    Array2::from_elem(x.dim(), f64::NAN)
                } else {
                    x.clone()
                })
            },
            &x0,
            &cfg,
        );
        assert!(matches!(r, Err(Error::NonFiniteField { step: 4 })));
    }

    #[test]
    fn euler_first_order_on_exponential() {
        let run = |nfe| {
            let x0 = seq(array![[1.0]]);
            let cfg = SolverConfig {
                nfe,
                sway_coefficient: 0.0,
            };
            euler_sample(|x, _| Ok(x.clone()), &x0, &cfg)
                .unwrap()
                .frames()[[0, 0]]
        };
        let oracle = run(4096);
        let ratio = (run(16) - oracle).abs() / (run(32) - oracle).abs();
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn grid_is_increasing_and_front_loaded(nfe in 1usize..64, s in -1.0..=0.0f64) {
            let g = sway_time_grid(&SolverConfig { nfe, sway_coefficient: s }).unwrap();
            prop_assert_eq!(g.len(), nfe + 1);
            prop_assert_eq!((g[0], g[nfe]), (0.0, 1.0));
            prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
            for (k, t) in g.iter().enumerate() {
                prop_assert!(*t <= k as f64 / nfe as f64 + 1e-15);
            }
        }

        #[test]
        fn path_hits_both_endpoints(a in proptest::collection::vec(-3.0..3.0f64, 4), b in proptest::collection::vec(-3.0..3.0f64, 4), t in 0.0..=1.0f64) {
            let x0 = FeatureSequence::new(Array2::from_shape_vec((2, 2), a).unwrap(), 25.0).unwrap();
            let x1 = FeatureSequence::new(Array2::from_shape_vec((2, 2), b).unwrap(), 25.0).unwrap();
            let p = interpolate_path(&x0, &x1, t).unwrap();
            let back = p.x_t.frames() + &(target_field(&x0, &x1).unwrap().frames() * (1.0 - t));
            for (x, y) in back.iter().zip(x1.frames().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

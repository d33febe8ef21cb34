//! Pinching quantity f = |E|²/(R+c)^γ, the Weyl C¹ norm, and the monitors
//! that track the Einstein-ratio estimate and the Weyl blow-up rate along a
//! run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::CurvatureBundle;
use crate::exterior::{basis, Minors};
use crate::grid::Field;
use crate::linalg;
use crate::metric::MetricField;
use crate::scalar::{lit, to_f64, Real};
use crate::tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PinchingError {
    #[error("R + c = {value:e} ≤ 0 at grid point {point}")]
    NonPositiveShiftedScalar { point: usize, value: f64 },
    #[error("invalid pinching parameters: {0}")]
    Invalid(String),
    #[error("estimated singular time {t_est} must exceed every recorded time (max {t_max})")]
    EstimateTooEarly { t_est: f64, t_max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinchingConfig {
    pub c: f64,
    pub gamma: f64,
}

impl PinchingConfig {
    pub fn new(c: f64, gamma: f64) -> Result<Self, PinchingError> {
        if !(c > 0.0) || !(gamma > 0.0) {
            return Err(PinchingError::Invalid(format!("c = {c}, gamma = {gamma}")));
        }
        Ok(PinchingConfig { c, gamma })
    }
}

/// Default shift c = 1 + max(0, −min R).
pub fn auto_shift(min_r: f64) -> f64 {
    1.0 + (-min_r).max(0.0)
}

/// R + c, failing where it is not positive.
pub fn shifted_scalar<T: Real>(b: &CurvatureBundle<T>, c: f64) -> Result<Field<T>, PinchingError> {
    let rt = b.scalar.map(1, |_, r, out| out[0] = r[0] + lit(c));
    for p in 0..rt.grid().npoints() {
        let v = rt.at(p)[0];
        if !(v > T::zero()) {
            return Err(PinchingError::NonPositiveShiftedScalar {
                point: p,
                value: to_f64(v),
            });
        }
    }
    Ok(rt)
}

/// f = |E|²/(R+c)^γ pointwise.
pub fn pinching_f<T: Real>(
    b: &CurvatureBundle<T>,
    m: &MetricField<T>,
    cfg: &PinchingConfig,
) -> Result<Field<T>, PinchingError> {
    let rt = shifted_scalar(b, cfg.c)?;
    let e2 = tensor::norm_sq(&b.einstein, 2, m);
    let gamma = lit::<T>(cfg.gamma);
    Ok(e2.map(1, |p, e, out| out[0] = e[0] / rt.at(p)[0].powf(gamma)))
}

/// Pair positions (i<j) in canonical order with their indices.
fn pairs() -> Vec<(usize, usize)> {
    basis()
        .masks(2)
        .iter()
        .map(|&m| {
            let i = m.trailing_zeros() as usize;
            let j = (m & !(1 << i)).trailing_zeros() as usize;
            (i, j)
        })
        .collect()
}

/// Position of the pair {a, b} (a ≠ b) and whether (a, b) is out of order.
fn pair_slot(a: usize, b: usize) -> (usize, bool) {
    let pos = basis().position(((1u32 << a) | (1u32 << b)) as u8);
    (pos, a > b)
}

/// sqrt(|A|² + |∇A|²) for a rank-4 field skew in its first and last index
/// pairs, evaluated on the Λ²⊗Λ² part; returns the field and its maximum.
pub fn curvature_c1_norm<T: Real>(a: &Field<T>, m: &MetricField<T>) -> (Field<T>, T) {
    assert_eq!(a.ncomp(), 2401);
    let pr = pairs();
    let grid = a.grid().clone();
    let gam = m.christoffel();
    let data = a.data();
    let half = lit::<T>(0.5);
    let four = lit::<T>(4.0);
    let f = Field::from_fn(&grid, 1, |p, out| {
        let at = |w: &[T], i: usize, j: usize, k: usize, l: usize| w[((i * 7 + j) * 7 + k) * 7 + l];
        let w = a.at(p);
        let frame = tensor::frame(&m.at(p).g);
        let f2 = Minors::up_to(&frame, 2);
        let f2 = f2.table(2);
        let gp = gam.at(p);
        // derivative of every component along each axis
        let mut dw = vec![T::zero(); 7 * 2401];
        for ax in grid.active_axes() {
            grid.diff_all(data, 2401, p, *ax, &mut dw[ax * 2401..(ax + 1) * 2401]);
        }
        // Λ² blocks of A and ∂_x A
        let mut blocks = vec![[[T::zero(); 21]; 21]; 8];
        for (ai, &(i, j)) in pr.iter().enumerate() {
            for (bi, &(k, l)) in pr.iter().enumerate() {
                blocks[7][ai][bi] = half * (at(w, i, j, k, l) - at(w, i, j, l, k));
                for x in grid.active_axes() {
                    let d = &dw[x * 2401..(x + 1) * 2401];
                    blocks[*x][ai][bi] = half * (at(d, i, j, k, l) - at(d, i, j, l, k));
                }
            }
        }
        // Christoffel terms: ∇_x B = ∂_x B − D_x B − B D_xᵀ, with D_x the
        // derivation Γ^q_{x·} induces on Λ².
        for x in 0..7 {
            let mut dx = [[T::zero(); 21]; 21];
            for (ai, &(i, j)) in pr.iter().enumerate() {
                for q in 0..7 {
                    if q != j {
                        let (idx, neg) = pair_slot(q, j);
                        let v = gp[q * 49 + x * 7 + i];
                        dx[ai][idx] += if neg { -v } else { v };
                    }
                    if q != i {
                        let (idx, neg) = pair_slot(i, q);
                        let v = gp[q * 49 + x * 7 + j];
                        dx[ai][idx] += if neg { -v } else { v };
                    }
                }
            }
            let b0 = &blocks[7];
            let mut corr = [[T::zero(); 21]; 21];
            for r in 0..21 {
                for c in 0..21 {
                    let mut s = T::zero();
                    for q in 0..21 {
                        s += dx[r][q] * b0[q][c] + b0[r][q] * dx[c][q];
                    }
                    corr[r][c] = s;
                }
            }
            for r in 0..21 {
                for c in 0..21 {
                    blocks[x][r][c] -= corr[r][c];
                }
            }
        }
        // orthonormal-frame components: F2 · B · F2ᵀ
        let tr = |b: &[[T; 21]; 21]| {
            let mut tmp = [[T::zero(); 21]; 21];
            for a_ in 0..21 {
                for c in 0..21 {
                    let mut s = T::zero();
                    for b_ in 0..21 {
                        s += f2[a_ * 21 + b_] * b[b_][c];
                    }
                    tmp[a_][c] = s;
                }
            }
            let mut o = [[T::zero(); 21]; 21];
            for a_ in 0..21 {
                for c in 0..21 {
                    let mut s = T::zero();
                    for b_ in 0..21 {
                        s += tmp[a_][b_] * f2[c * 21 + b_];
                    }
                    o[a_][c] = s;
                }
            }
            o
        };
        let base = tr(&blocks[7]);
        let mut n0 = T::zero();
        for r in &base {
            for &v in r {
                n0 += v * v;
            }
        }
        let tb: Vec<_> = (0..7).map(|x| tr(&blocks[x])).collect();
        let mut n1 = T::zero();
        for xa in 0..7 {
            for a_ in 0..21 {
                for c in 0..21 {
                    let mut s = T::zero();
                    for x in 0..7 {
                        s += frame[xa][x] * tb[x][a_][c];
                    }
                    n1 += s * s;
                }
            }
        }
        out[0] = (four * (n0 + n1)).sqrt();
    });
    let mx = f.max();
    (f, mx)
}

/// Largest ratio max(λ_max, 1/λ_min) of g against g₀ over the grid.
pub fn metric_distortion<T: Real>(g0: &MetricField<T>, g: &MetricField<T>) -> T {
    let mut worst = T::one();
    for p in 0..g.grid().npoints() {
        let ev = linalg::generalized_eigenvalues(&g0.at(p).g, &g.at(p).g).expect("positive metric");
        worst = worst.max(ev[6]).max(T::one() / ev[0]);
    }
    worst
}

/// One row of monitor output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PinchingReport {
    pub t: f64,
    /// max and min of f, one entry per configured γ.
    pub f_max: Vec<f64>,
    pub f_min: Vec<f64>,
    pub e_norm_max: f64,
    pub w_c1_max: f64,
    /// max |E|/(R+c).
    pub ratio_lhs: f64,
    /// max over recorded times of max |W|_{C¹}/(R+c).
    pub ratio_rhs_driver: f64,
    pub hitchin_volume: f64,
    pub min_r: f64,
    pub max_r: f64,
    pub metric_distortion: f64,
    /// exp(∫ max 2|S| dt), an upper bound for the distortion.
    pub distortion_bound: f64,
}

/// Accumulators carried from one monitored state to the next.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorCarry {
    pub driver_max: f64,
    pub s_integral: f64,
    pub last_t: Option<f64>,
    pub last_s_max: f64,
}

/// Per-state pinching quantities (no history).
#[derive(Clone, Debug, PartialEq)]
pub struct PinchingSample {
    pub f_max: Vec<f64>,
    pub f_min: Vec<f64>,
    pub e_norm_max: f64,
    pub w_c1_max: f64,
    pub ratio_lhs: f64,
    pub driver: f64,
    pub min_r: f64,
    pub max_r: f64,
    /// max over the grid of |S|.
    pub s_norm_max: f64,
}

/// Evaluates everything the monitors need at one state. The bundle must
/// carry the Weyl and flow tensors.
pub fn sample<T: Real>(
    b: &CurvatureBundle<T>,
    m: &MetricField<T>,
    c: f64,
    gammas: &[f64],
) -> Result<PinchingSample, PinchingError> {
    let rt = shifted_scalar(b, c)?;
    let mut f_max = Vec::new();
    let mut f_min = Vec::new();
    for &g in gammas {
        let f = pinching_f(b, m, &PinchingConfig::new(c, g)?)?;
        f_max.push(to_f64(f.max()));
        f_min.push(to_f64(f.min()));
    }
    let e2 = tensor::norm_sq(&b.einstein, 2, m);
    let w = b.weyl.as_ref().expect("Weyl attached");
    let (wc1, wmax) = curvature_c1_norm(w, m);
    let s = b.flow_tensor.as_ref().expect("flow tensor attached");
    let s2 = tensor::norm_sq(s, 2, m);
    let mut ratio = T::zero();
    let mut driver = T::zero();
    for p in 0..rt.grid().npoints() {
        let r = rt.at(p)[0];
        ratio = ratio.max(e2.at(p)[0].sqrt() / r);
        driver = driver.max(wc1.at(p)[0] / r);
    }
    Ok(PinchingSample {
        f_max,
        f_min,
        e_norm_max: to_f64(e2.max().sqrt()),
        w_c1_max: to_f64(wmax),
        ratio_lhs: to_f64(ratio),
        driver: to_f64(driver),
        min_r: to_f64(b.scalar.min()),
        max_r: to_f64(b.scalar.max()),
        s_norm_max: to_f64(s2.max().sqrt()),
    })
}

impl MonitorCarry {
    /// Folds a sample taken at time `t` into a report row.
    pub fn record(
        &mut self,
        t: f64,
        s: &PinchingSample,
        volume: f64,
        distortion: f64,
    ) -> PinchingReport {
        self.driver_max = self.driver_max.max(s.driver);
        if let Some(t0) = self.last_t {
            // upper sum over the interval
            self.s_integral += (t - t0) * 2.0 * self.last_s_max.max(s.s_norm_max);
        }
        self.last_t = Some(t);
        self.last_s_max = s.s_norm_max;
        PinchingReport {
            t,
            f_max: s.f_max.clone(),
            f_min: s.f_min.clone(),
            e_norm_max: s.e_norm_max,
            w_c1_max: s.w_c1_max,
            ratio_lhs: s.ratio_lhs,
            ratio_rhs_driver: self.driver_max,
            hitchin_volume: volume,
            min_r: s.min_r,
            max_r: s.max_r,
            metric_distortion: distortion,
            distortion_bound: self.s_integral.exp(),
        }
    }
}

/// Least C₂ ≥ 0 with LHS(t) ≤ max{c₁, 2C₂² + 1} + C₂·D(t) at every time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EinsteinRatioFit {
    pub c1_small: f64,
    pub c2: f64,
    pub c1: f64,
    /// C₁ + C₂·D(t) − LHS(t), one per record.
    pub margins: Vec<f64>,
}

impl EinsteinRatioFit {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Smallest C₂ ≥ 0 meeting one inequality LHS ≤ max{c₁, 2C₂²+1} + C₂·D.
fn least_c2(lhs: f64, d: f64, c1: f64) -> f64 {
    if lhs <= c1.max(1.0) {
        return 0.0;
    }
    // branch where C₁ = c₁
    let linear = if d > 0.0 {
        (lhs - c1) / d
    } else {
        f64::INFINITY
    };
    if 2.0 * linear * linear + 1.0 <= c1 {
        return linear;
    }
    // branch where C₁ = 2C₂² + 1: 2C₂² + D·C₂ + 1 − LHS = 0
    (-d + (d * d + 8.0 * (lhs - 1.0)).sqrt()) / 4.0
}

/// Fits C₂ over the recorded history, with c₁ = sqrt(max f(0)) for γ = 2.
pub fn fit_einstein_ratio(history: &[PinchingReport], c1_small: f64) -> EinsteinRatioFit {
    let c2 = history
        .iter()
        .map(|r| least_c2(r.ratio_lhs, r.ratio_rhs_driver, c1_small))
        .fold(0.0, f64::max);
    let c1 = c1_small.max(2.0 * c2 * c2 + 1.0);
    let margins = history
        .iter()
        .map(|r| c1 + c2 * r.ratio_rhs_driver - r.ratio_lhs)
        .collect();
    EinsteinRatioFit {
        c1_small,
        c2,
        c1,
        margins,
    }
}

/// r(t) = max|W|_{C¹} · (T_est − t)^{1−δ} for each record.
pub fn weyl_rate_series(
    history: &[PinchingReport],
    t_est: f64,
    delta: f64,
) -> Result<Vec<f64>, PinchingError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PinchingError::Invalid(format!(
            "delta = {delta} outside (0, 1)"
        )));
    }
    let t_max = history
        .iter()
        .map(|r| r.t)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(t_est > t_max) {
        return Err(PinchingError::EstimateTooEarly { t_est, t_max });
    }
    Ok(history
        .iter()
        .map(|r| r.w_c1_max * (t_est - r.t).powf(1.0 - delta))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{riemann, weyl};
    use crate::grid::GridSpec;
    use crate::initial::{perturbed, Perturbation};
    use crate::metric::StructureField;
    use crate::torsion::torsion_from_phi;

    fn bundle(n: usize) -> (StructureField<f64>, CurvatureBundle<f64>) {
        let grid = GridSpec::with_active(&[0, 1], n).unwrap();
        let s = StructureField::new(perturbed(&grid, &Perturbation::default())).unwrap();
        let tf = torsion_from_phi(&s.phi, &s.psi, &s.metric);
        let mut b = riemann(&s.metric);
        b.attach_torsion(&tf.t, &s.metric);
        b.attach_weyl(&s.metric);
        (s, b)
    }

    #[test]
    fn flat_gives_zero_f() {
        let grid = GridSpec::<f64>::with_active(&[0, 1], 8).unwrap();
        let s = StructureField::new(crate::initial::flat(&grid)).unwrap();
        let b = riemann(&s.metric);
        let f = pinching_f(&b, &s.metric, &PinchingConfig::new(1.0, 2.0).unwrap()).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn gamma_two_identity() {
        // f = |R̃ic|²/R̃² − 1/7 with R̃ic = Ric + (c/7)g
        let (s, b) = bundle(10);
        let c = 1.3;
        let f = pinching_f(&b, &s.metric, &PinchingConfig::new(c, 2.0).unwrap()).unwrap();
        for p in 0..f.grid().npoints() {
            let g = &s.metric.at(p).g;
            let mut rt = b.ric.at(p).to_vec();
            for i in 0..7 {
                for j in 0..7 {
                    rt[i * 7 + j] += c / 7.0 * g[i][j];
                }
            }
            let rs = b.scalar.at(p)[0] + c;
            let other = tensor::norm_sq_at(&rt, 2, g) / (rs * rs) - 1.0 / 7.0;
            assert!((f.at(p)[0] - other).abs() < 1e-13);
        }
    }

    #[test]
    fn non_positive_shift_is_an_error() {
        let (s, b) = bundle(8);
        let r = pinching_f(
            &b,
            &s.metric,
            &PinchingConfig {
                c: 1e-9,
                gamma: 2.0,
            },
        );
        assert!(matches!(
            r,
            Err(PinchingError::NonPositiveShiftedScalar { .. })
        ));
    }

    #[test]
    fn lambda_two_norm_matches_dense() {
        let (s, b) = bundle(8);
        let w = weyl(&b, &s.metric).trace_free;
        // antisymmetrise in the last pair so both evaluations see the same tensor
        let w = w.map(2401, |_, x, out| {
            for i in 0..7 {
                for j in 0..7 {
                    for k in 0..7 {
                        for l in 0..7 {
                            out[((i * 7 + j) * 7 + k) * 7 + l] = 0.5
                                * (x[((i * 7 + j) * 7 + k) * 7 + l]
                                    - x[((i * 7 + j) * 7 + l) * 7 + k]);
                        }
                    }
                }
            }
        });
        let (fast, a) = curvature_c1_norm(&w, &s.metric);
        let (dense, b2) = tensor::c1_norm(&w, 4, &s.metric);
        assert!((a - b2).abs() < 1e-12 * b2.max(1.0), "{a} {b2}");
        assert!(fast.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn fit_flat_history() {
        let h = vec![PinchingReport::default(); 3];
        let fit = fit_einstein_ratio(&h, 0.0);
        assert_eq!(fit.c2, 0.0);
        assert!(fit.min_margin() >= 0.0);
    }

    #[test]
    fn fit_single_record_is_tight() {
        let r = PinchingReport {
            ratio_lhs: 5.0,
            ratio_rhs_driver: 2.0,
            ..Default::default()
        };
        let fit = fit_einstein_ratio(&[r], 0.5);
        assert!(fit.margins[0].abs() < 1e-12, "{fit:?}");
        // large c₁ branch
        let r = PinchingReport {
            ratio_lhs: 12.0,
            ratio_rhs_driver: 2.0,
            ..Default::default()
        };
        let fit = fit_einstein_ratio(&[r], 10.0);
        assert!((fit.c2 - 1.0).abs() < 1e-12 && fit.c1 == 10.0);
        assert!(fit.margins[0].abs() < 1e-12);
    }

    #[test]
    fn rate_series_for_inverse_blow_up() {
        // |W|_{C¹} = 1/(T − t) gives r(t) = (T − t)^{−δ}, increasing in t
        let big_t = 2.0;
        let delta = 0.3;
        let h: Vec<_> = (0..10)
            .map(|k| {
                let t = 0.19 * k as f64;
                PinchingReport {
                    t,
                    w_c1_max: 1.0 / (big_t - t),
                    ..Default::default()
                }
            })
            .collect();
        let r = weyl_rate_series(&h, big_t, delta).unwrap();
        for (rep, v) in h.iter().zip(&r) {
            assert!((v - (big_t - rep.t).powf(-delta)).abs() < 1e-12);
        }
        assert!(r.windows(2).all(|w| w[1] > w[0]));
        assert!(weyl_rate_series(&h, 1.0, delta).is_err());
    }

    #[test]
    fn distortion_of_scaled_metric() {
        let grid = GridSpec::<f64>::with_active(&[0], 6).unwrap();
        let a = MetricField::from_fn(&grid, |_| linalg::identity()).unwrap();
        let b = MetricField::from_fn(&grid, |_| linalg::scale(&linalg::identity(), 0.5)).unwrap();
        assert!((metric_distortion(&a, &b) - 2.0).abs() < 1e-12);
    }
}

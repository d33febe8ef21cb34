//! Numerical checks of the curvature evolution equations along the closed
//! Laplacian flow. Each equality is tested by comparing a centred time
//! difference of a curvature quantity with the predicted right-hand side at
//! the middle state; the residual must shrink at second order in dt.
//!
//! All right-hand sides use the same discrete derivatives as the flow, so a
//! residual that does not shrink under dt refinement points at the formula,
//! not at mixed discretisations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{riemann, CurvatureBundle};
use crate::flow::{fixed_trajectory, rhs, FlowError, FlowState};
use crate::grid::Field;
use crate::linalg::{self, Mat7};
use crate::metric::{MetricField, StructureField};
use crate::pinching::{self, PinchingError};
use crate::scalar::{lit, to_f64, Real};
use crate::tensor::{self, as_mat};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Pinching(#[from] PinchingError),
    #[error("need at least {need} states, got {got}")]
    TooFewStates { need: usize, got: usize },
}

/// Which evolution equation to test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvolutionCheck {
    /// Ricci under a general metric variation, η = ∂ₜg.
    GeneralVariationRicci,
    /// Scalar curvature under a general metric variation.
    GeneralVariationScalar,
    RicciEvolution,
    RicciNormEvolution,
    ScalarEvolution,
    ShiftedRicciNormEvolution,
    ShiftedScalarEvolution,
    PinchingEvolution {
        gamma: f64,
    },
}

impl EvolutionCheck {
    pub fn name(&self) -> String {
        match self {
            Self::GeneralVariationRicci => "general_variation_ricci".into(),
            Self::GeneralVariationScalar => "general_variation_scalar".into(),
            Self::RicciEvolution => "ricci_evolution".into(),
            Self::RicciNormEvolution => "ricci_norm_evolution".into(),
            Self::ScalarEvolution => "scalar_evolution".into(),
            Self::ShiftedRicciNormEvolution => "shifted_ricci_norm_evolution".into(),
            Self::ShiftedScalarEvolution => "shifted_scalar_evolution".into(),
            Self::PinchingEvolution { gamma } => format!("pinching_evolution[gamma={gamma}]"),
        }
    }

    /// Every equality check, with one pinching check per exponent.
    pub fn all(gammas: &[f64]) -> Vec<Self> {
        let mut v = vec![
            Self::GeneralVariationRicci,
            Self::GeneralVariationScalar,
            Self::RicciEvolution,
            Self::RicciNormEvolution,
            Self::ScalarEvolution,
            Self::ShiftedRicciNormEvolution,
            Self::ShiftedScalarEvolution,
        ];
        v.extend(
            gammas
                .iter()
                .map(|&gamma| Self::PinchingEvolution { gamma }),
        );
        v
    }

    /// Parses a name produced by [`EvolutionCheck::name`] (or the bare
    /// family name `pinching_evolution`, which expands to every γ).
    pub fn parse(name: &str, gammas: &[f64]) -> Option<Vec<Self>> {
        let fixed = Self::all(&[]);
        if let Some(c) = fixed.into_iter().find(|c| c.name() == name) {
            return Some(vec![c]);
        }
        if name == "pinching_evolution" {
            return Some(
                gammas
                    .iter()
                    .map(|&gamma| Self::PinchingEvolution { gamma })
                    .collect(),
            );
        }
        let g = name
            .strip_prefix("pinching_evolution[gamma=")?
            .strip_suffix(']')?;
        let gamma: f64 = g.parse().ok()?;
        (gamma > 0.0).then_some(vec![Self::PinchingEvolution { gamma }])
    }

    fn ncomp(&self) -> usize {
        match self {
            Self::GeneralVariationRicci | Self::RicciEvolution => 49,
            _ => 1,
        }
    }
}

/// Tolerances for the verifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyTolerances {
    /// Least acceptable measured order in dt.
    pub min_time_order: f64,
    /// Relative spatial tolerance is `space_coeff · h⁴`.
    pub space_coeff: f64,
    /// Absolute bound for checks whose both sides vanish.
    pub static_abs: f64,
    /// Bound for pure algebra that involves no discretisation.
    pub algebraic: f64,
}

impl Default for VerifyTolerances {
    fn default() -> Self {
        VerifyTolerances {
            min_time_order: 1.8,
            space_coeff: 20.0,
            static_abs: 1e-10,
            algebraic: 1e-9,
        }
    }
}

impl VerifyTolerances {
    pub fn spatial(&self, h: f64) -> f64 {
        self.space_coeff * h.powi(4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionCheckResult {
    pub name: String,
    /// max |finite-difference ∂ₜ| at the finest dt.
    pub lhs_fd: f64,
    /// max |predicted right-hand side| at the finest dt.
    pub rhs: f64,
    /// max |residual| at the finest dt.
    pub residual_max: f64,
    /// max |residual| after removing the dt² term (Richardson).
    pub residual_extrapolated: f64,
    /// residual_extrapolated / max(lhs_fd, rhs).
    pub relative: f64,
    pub tolerance: f64,
    /// (time order, space order) the discretisation should show.
    pub expected_order: (f64, f64),
    /// Measured dt order; absent when both sides vanish.
    pub measured_time_order: Option<f64>,
    pub passed: bool,
}

/// Below this magnitude a quantity counts as identically zero.
pub const STATIC_SCALE: f64 = 1e-10;

/// A fixed-state identity between derived quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckResult {
    pub name: String,
    pub residual_max: f64,
    pub scale: f64,
    pub relative: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CrossCheckResult {
    fn new(name: &str, residual: f64, scale: f64, tolerance: f64) -> Self {
        // both sides negligible: compare absolutely
        let relative = if scale > STATIC_SCALE {
            residual / scale
        } else {
            residual
        };
        CrossCheckResult {
            name: name.into(),
            residual_max: residual,
            scale,
            relative,
            tolerance,
            passed: relative <= tolerance,
        }
    }
}

// ---------------------------------------------------------------------------
// pointwise algebra on coordinate components

fn raise<T: Real>(a: &[T], gi: &Mat7<T>) -> Mat7<T> {
    linalg::matmul(&linalg::matmul(gi, &as_mat(a)), gi)
}

fn dot<T: Real>(a: &[T], bu: &Mat7<T>) -> T {
    let mut s = T::zero();
    for i in 0..7 {
        for j in 0..7 {
            s += a[i * 7 + j] * bu[i][j];
        }
    }
    s
}

/// (Rm ⋅ X)_ij = R_pijl X^{pl} for a raised X.
fn rm_apply<T: Real>(rm: &[T], xu: &Mat7<T>) -> Mat7<T> {
    let mut o = [[T::zero(); 7]; 7];
    for p in 0..7 {
        for i in 0..7 {
            for j in 0..7 {
                let base = ((p * 7 + i) * 7 + j) * 7;
                let mut s = T::zero();
                for l in 0..7 {
                    s += rm[base + l] * xu[p][l];
                }
                o[i][j] += s;
            }
        }
    }
    o
}

/// (A g⁻¹ B)_ij = A_i^p B_pj.
fn mixed<T: Real>(a: &[T], gi: &Mat7<T>, b: &[T]) -> Mat7<T> {
    linalg::matmul(&linalg::matmul(&as_mat(a), gi), &as_mat(b))
}

fn mat_dot<T: Real>(a: &Mat7<T>, bu: &Mat7<T>) -> T {
    let mut s = T::zero();
    for i in 0..7 {
        for j in 0..7 {
            s += a[i][j] * bu[i][j];
        }
    }
    s
}

/// A_ij A^j_l A^{li}.
pub fn cubic_trace<T: Real>(a: &[T], gi: &Mat7<T>) -> T {
    let am = linalg::matmul(gi, &as_mat(a));
    let a2 = linalg::matmul(&am, &am);
    let mut s = T::zero();
    for i in 0..7 {
        for j in 0..7 {
            s += a2[i][j] * am[j][i];
        }
    }
    s
}

/// W_pijl A^{pl} A^{ij}.
pub fn curvature_pair<T: Real>(w: &[T], a: &[T], gi: &Mat7<T>) -> T {
    let au = raise(a, gi);
    mat_dot(&rm_apply(w, &au), &au)
}

// ---------------------------------------------------------------------------
// derived fields at one state

/// Every derived field the right-hand sides need at one state.
pub struct StateTerms<'a, T: Real> {
    pub m: &'a MetricField<T>,
    pub b: &'a CurvatureBundle<T>,
    pub c: f64,
    pub t: &'a Field<T>,
    pub tn2: Field<T>,
    pub rt: Field<T>,
    pub rtic_norm: Field<T>,
    pub ric_norm: Field<T>,
    pub nabla_ric: Field<T>,
    pub nabla_t: Field<T>,
    pub grad_r: Field<T>,
    pub lap_r: Field<T>,
    pub lap_rt: Field<T>,
    pub lap_s: Field<T>,
    pub lap_that: Field<T>,
    pub lap_tn2: Field<T>,
    pub hess_tn2: Field<T>,
    pub grad_div_that: Field<T>,
    pub div_div_that: Field<T>,
    pub lap_ric_norm: Field<T>,
    pub lap_rtic_norm: Field<T>,
    pub lap_ric: Field<T>,
    // general variation with η = −2S
    pub eta: Field<T>,
    pub lap_eta: Field<T>,
    pub hess_tr_eta: Field<T>,
    pub lap_tr_eta: Field<T>,
    pub grad_div_eta: Field<T>,
    pub div_div_eta: Field<T>,
}

/// Scalar quantities of the shifted curvature used by several formulas.
pub struct AuxTerms<T> {
    pub i: Field<T>,
    pub j: Field<T>,
    pub h: Field<T>,
    /// E_ij E^j_l E^{li}.
    pub e3: Field<T>,
    /// W_pijl E^{pl} E^{ij} with the trace-free Weyl tensor.
    pub wee: Field<T>,
    /// |R̃·∇R̃ic − ∇R̃ ⊗ R̃ic|².
    pub grad_combo: Field<T>,
}

impl<'a, T: Real> StateTerms<'a, T> {
    /// `b` must carry the torsion-derived and Weyl fields.
    pub fn new(
        m: &'a MetricField<T>,
        b: &'a CurvatureBundle<T>,
        t: &'a Field<T>,
        c: f64,
    ) -> Result<Self, PinchingError> {
        let rt = pinching::shifted_scalar(b, c)?;
        let s = b.flow_tensor.as_ref().expect("flow tensor attached");
        let that = b.t_hat.as_ref().expect("torsion attached");
        let cs = lit::<T>(c) / lit(7.0);
        let tn2 = tensor::norm_sq(t, 2, m);
        let ric_norm = tensor::norm_sq(&b.ric, 2, m);
        let rtic_norm = b.ric.map(1, |p, r, out| {
            let mut x = r.to_vec();
            let g = &m.at(p).g;
            for i in 0..7 {
                for j in 0..7 {
                    x[i * 7 + j] += cs * g[i][j];
                }
            }
            out[0] = tensor::norm_sq_at(&x, 2, g);
        });
        let nabla_ric = tensor::covariant_derivative(&b.ric, 2, m);
        let div_that = tensor::divergence(that, 2, m);
        let eta = s.scaled(lit(-2.0));
        let tr_eta = tensor::trace(&eta, m);
        let div_eta = tensor::divergence(&eta, 2, m);
        Ok(StateTerms {
            m,
            b,
            c,
            t,
            grad_r: tensor::covariant_derivative(&b.scalar, 0, m),
            lap_r: tensor::rough_laplacian(&b.scalar, 0, m),
            lap_rt: tensor::rough_laplacian(&rt, 0, m),
            lap_s: tensor::rough_laplacian(s, 2, m),
            lap_that: tensor::rough_laplacian(that, 2, m),
            lap_tn2: tensor::rough_laplacian(&tn2, 0, m),
            hess_tn2: tensor::second_covariant(&tn2, 0, m),
            grad_div_that: tensor::covariant_derivative(&div_that, 1, m),
            div_div_that: tensor::divergence(&div_that, 1, m),
            lap_ric_norm: tensor::rough_laplacian(&ric_norm, 0, m),
            lap_rtic_norm: tensor::rough_laplacian(&rtic_norm, 0, m),
            lap_ric: tensor::laplacian_from_gradient(&nabla_ric, 2, m),
            nabla_t: tensor::covariant_derivative(t, 2, m),
            lap_eta: tensor::rough_laplacian(&eta, 2, m),
            hess_tr_eta: tensor::second_covariant(&tr_eta, 0, m),
            lap_tr_eta: tensor::rough_laplacian(&tr_eta, 0, m),
            grad_div_eta: tensor::covariant_derivative(&div_eta, 1, m),
            div_div_eta: tensor::divergence(&div_eta, 1, m),
            eta,
            tn2,
            rt,
            rtic_norm,
            ric_norm,
            nabla_ric,
        })
    }

    fn grid(&self) -> &std::sync::Arc<crate::grid::GridSpec<T>> {
        self.m.grid()
    }

    fn that(&self) -> &Field<T> {
        self.b.t_hat.as_ref().expect("torsion attached")
    }

    fn s(&self) -> &Field<T> {
        self.b.flow_tensor.as_ref().expect("flow tensor attached")
    }

    fn scalar(&self, f: impl Fn(usize) -> T + Sync) -> Field<T> {
        Field::from_fn(self.grid(), 1, |p, out| out[0] = f(p))
    }

    /// R̃ic_ij = R_ij + (c/7)g_ij at one point.
    fn rtic_at(&self, p: usize) -> Vec<T> {
        let mut x = self.b.ric.at(p).to_vec();
        let g = &self.m.at(p).g;
        let cs = lit::<T>(self.c) / lit(7.0);
        for i in 0..7 {
            for j in 0..7 {
                x[i * 7 + j] += cs * g[i][j];
            }
        }
        x
    }

    /// ∇^j T_im ∇^i T^m_j.
    fn grad_t_square_at(&self, p: usize) -> T {
        let gi = &self.m.at(p).g_inv;
        let d = self.nabla_t.at(p);
        let up = tensor::transform_all(d, 3, gi);
        // Σ U^{j i m} ∇_i T_{m j}
        let mut s = T::zero();
        for j in 0..7 {
            for i in 0..7 {
                for mm in 0..7 {
                    s += up[(j * 7 + i) * 7 + mm] * d[(i * 7 + mm) * 7 + j];
                }
            }
        }
        s
    }

    /// R_ijmn T^{in} T^{mj}.
    fn rm_tt_at(&self, p: usize) -> T {
        let gi = &self.m.at(p).g_inv;
        let tu = raise(self.t.at(p), gi);
        let rm = self.b.rm.at(p);
        let mut s = T::zero();
        for i in 0..7 {
            for j in 0..7 {
                for mm in 0..7 {
                    for n in 0..7 {
                        s += rm[((i * 7 + j) * 7 + mm) * 7 + n] * tu[i][n] * tu[mm][j];
                    }
                }
            }
        }
        s
    }

    pub fn aux(&self) -> AuxTerms<T> {
        let c = lit::<T>(self.c);
        let k = |x: f64| lit::<T>(x);
        let i = self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let rt = self.rt.at(p)[0];
            let rn = self.rtic_norm.at(p)[0];
            let rtu = raise(&self.rtic_at(p), gi);
            let rm_that = rm_apply(self.b.rm.at(p), &raise(self.that().at(p), gi));
            -k(4.0 / 3.0) * rt * rn
                + k(16.0 / 21.0) * c * rn
                + k(8.0) * mat_dot(&rm_that, &rtu)
                + k(4.0 / 21.0) * c * rt * rt
                - k(16.0 / 147.0) * c * c * rt
        });
        let j = self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let rtu = raise(&self.rtic_at(p), gi);
            k(2.0 / 3.0) * self.rt.at(p)[0] * self.lap_tn2.at(p)[0]
                + k(4.0) * dot(self.lap_that.at(p), &rtu)
                - k(2.0 / 3.0) * dot(self.hess_tn2.at(p), &rtu)
                - k(8.0) * dot(self.grad_div_that.at(p), &rtu)
        });
        let h = self.scalar(|p| {
            let rt = self.rt.at(p)[0];
            -k(2.0 / 3.0) * rt * rt + k(16.0 / 21.0) * c * rt - k(8.0 / 21.0) * c * c
                + k(4.0) * self.rm_tt_at(p)
                - k(4.0) * self.grad_t_square_at(p)
        });
        let e3 = self.scalar(|p| cubic_trace(self.b.einstein.at(p), &self.m.at(p).g_inv));
        let w = self.b.weyl.as_ref().expect("Weyl attached");
        let wee =
            self.scalar(|p| curvature_pair(w.at(p), self.b.einstein.at(p), &self.m.at(p).g_inv));
        let grad_combo = self.scalar(|p| {
            let rt = self.rt.at(p)[0];
            let rtic = self.rtic_at(p);
            let gr = self.grad_r.at(p);
            let nr = self.nabla_ric.at(p);
            let mut x = vec![T::zero(); 343];
            for a in 0..7 {
                for ij in 0..49 {
                    x[a * 49 + ij] = rt * nr[a * 49 + ij] - gr[a] * rtic[ij];
                }
            }
            tensor::norm_sq_at(&x, 3, &self.m.at(p).g)
        });
        AuxTerms {
            i,
            j,
            h,
            e3,
            wee,
            grad_combo,
        }
    }

    /// ∂ₜRic predicted for ∂ₜg = η with η = −2S.
    pub fn general_variation_ricci(&self) -> Field<T> {
        let half = lit::<T>(0.5);
        Field::from_fn(self.grid(), 49, |p, out| {
            let gi = &self.m.at(p).g_inv;
            let eta = self.eta.at(p);
            let ric = self.b.ric.at(p);
            let re = mixed(ric, gi, eta);
            let rm_eta = rm_apply(self.b.rm.at(p), &raise(eta, gi));
            let lap = self.lap_eta.at(p);
            let hess = self.hess_tr_eta.at(p);
            let gd = self.grad_div_eta.at(p);
            for i in 0..7 {
                for j in 0..7 {
                    let lich = lap[i * 7 + j] - re[i][j] - re[j][i] + lit::<T>(2.0) * rm_eta[i][j];
                    out[i * 7 + j] =
                        -half * (lich + hess[i * 7 + j] - gd[i * 7 + j] - gd[j * 7 + i]);
                }
            }
        })
    }

    /// ∂ₜR predicted for ∂ₜg = η.
    pub fn general_variation_scalar(&self) -> Field<T> {
        self.scalar(|p| {
            let eu = raise(self.eta.at(p), &self.m.at(p).g_inv);
            -self.lap_tr_eta.at(p)[0] + self.div_div_eta.at(p)[0] - dot(self.b.ric.at(p), &eu)
        })
    }

    pub fn ricci_evolution(&self) -> Field<T> {
        let two = lit::<T>(2.0);
        Field::from_fn(self.grid(), 49, |p, out| {
            let gi = &self.m.at(p).g_inv;
            let ric = self.b.ric.at(p);
            let th = self.that().at(p);
            let rr = mixed(ric, gi, ric);
            let rt = mixed(ric, gi, th);
            let rm = self.b.rm.at(p);
            let rm_ric = rm_apply(rm, &raise(ric, gi));
            let rm_th = rm_apply(rm, &raise(th, gi));
            let ls = self.lap_s.at(p);
            let hs = self.hess_tn2.at(p);
            let gd = self.grad_div_that.at(p);
            for i in 0..7 {
                for j in 0..7 {
                    out[i * 7 + j] =
                        ls[i * 7 + j] - two * rr[i][j] - two * rt[i][j] - two * rt[j][i]
                            + two * rm_ric[i][j]
                            + lit::<T>(4.0) * rm_th[i][j]
                            - hs[i * 7 + j] / lit(3.0)
                            - two * gd[i * 7 + j]
                            - two * gd[j * 7 + i];
                }
            }
        })
    }

    pub fn ricci_norm_evolution(&self) -> Field<T> {
        let k = |x: f64| lit::<T>(x);
        self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let ric = self.b.ric.at(p);
            let ru = raise(ric, gi);
            let rm = self.b.rm.at(p);
            let rm_ric = rm_apply(rm, &ru);
            let rm_th = rm_apply(rm, &raise(self.that().at(p), gi));
            let grad_ric2 = tensor::norm_sq_at(self.nabla_ric.at(p), 3, &self.m.at(p).g);
            self.lap_ric_norm.at(p)[0] - k(2.0) * grad_ric2
                + k(4.0) * mat_dot(&rm_ric, &ru)
                + k(4.0 / 3.0) * self.tn2.at(p)[0] * self.ric_norm.at(p)[0]
                + k(8.0) * mat_dot(&rm_th, &ru)
                + k(2.0 / 3.0) * self.b.scalar.at(p)[0] * self.lap_tn2.at(p)[0]
                + k(4.0) * dot(self.lap_that.at(p), &ru)
                - k(2.0 / 3.0) * dot(self.hess_tn2.at(p), &ru)
                - k(8.0) * dot(self.grad_div_that.at(p), &ru)
        })
    }

    pub fn scalar_evolution(&self) -> Field<T> {
        let k = |x: f64| lit::<T>(x);
        self.scalar(|p| {
            let r = self.b.scalar.at(p)[0];
            self.lap_r.at(p)[0] + k(2.0) * self.ric_norm.at(p)[0] - k(2.0 / 3.0) * r * r
                + k(4.0) * self.rm_tt_at(p)
                - k(4.0) * self.grad_t_square_at(p)
        })
    }

    pub fn shifted_ricci_norm_evolution(&self, aux: &AuxTerms<T>) -> Field<T> {
        let k = |x: f64| lit::<T>(x);
        self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let rtu = raise(&self.rtic_at(p), gi);
            let grad2 = tensor::norm_sq_at(self.nabla_ric.at(p), 3, &self.m.at(p).g);
            self.lap_rtic_norm.at(p)[0] - k(2.0) * grad2
                + k(4.0) * mat_dot(&rm_apply(self.b.rm.at(p), &rtu), &rtu)
                + aux.i.at(p)[0]
                + aux.j.at(p)[0]
        })
    }

    pub fn shifted_scalar_evolution(&self, aux: &AuxTerms<T>) -> Field<T> {
        self.scalar(|p| {
            self.lap_rt.at(p)[0] + lit::<T>(2.0) * self.rtic_norm.at(p)[0] + aux.h.at(p)[0]
        })
    }

    /// Right-hand side of the evolution of f = |E|²/R̃^γ.
    pub fn pinching_evolution(&self, aux: &AuxTerms<T>, gamma: f64) -> Field<T> {
        let f = self.pinching_field(gamma);
        let grad_f = tensor::covariant_derivative(&f, 0, self.m);
        let lap_f = tensor::laplacian_from_gradient(&grad_f, 0, self.m);
        let gm = lit::<T>(gamma);
        let one = T::one();
        let two = lit::<T>(2.0);
        let c = lit::<T>(self.c);
        let k = |x: f64| lit::<T>(x);
        let e2 = tensor::norm_sq(&self.b.einstein, 2, self.m);
        self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let rt = self.rt.at(p)[0];
            let gr = self.grad_r.at(p);
            let gf = grad_f.at(p);
            let mut fr = T::zero();
            let mut rr = T::zero();
            for a in 0..7 {
                for b in 0..7 {
                    fr += gi[a][b] * gf[a] * gr[b];
                    rr += gi[a][b] * gr[a] * gr[b];
                }
            }
            let e = e2.at(p)[0];
            let h = aux.h.at(p)[0];
            let bracket = -gm * e * e + two * rt * aux.wee.at(p)[0] - k(0.8) * rt * aux.e3.at(p)[0]
                + (k(5.0 / 21.0) - gm / k(7.0)) * rt * rt * e
                + c / k(21.0) * rt * e
                - two * c / k(49.0) * rt * rt * rt;
            lap_f.at(p)[0] + two * (gm - one) / rt * fr
                - two / rt.powf(gm + two) * aux.grad_combo.at(p)[0]
                - (two - gm) * (gm - one) / (rt * rt) * rr * f.at(p)[0]
                + two / rt.powf(gm + one) * bracket
                + (aux.i.at(p)[0] + aux.j.at(p)[0]) / rt.powf(gm)
                - gm / rt.powf(gm + one) * self.rtic_norm.at(p)[0] * h
                - (two - gm) / k(7.0) * h / rt.powf(gm - one)
        })
    }

    pub fn pinching_field(&self, gamma: f64) -> Field<T> {
        let e2 = tensor::norm_sq(&self.b.einstein, 2, self.m);
        let g = lit::<T>(gamma);
        e2.map(1, |p, e, out| out[0] = e[0] / self.rt.at(p)[0].powf(g))
    }

    /// Predicted time derivative for one check.
    pub fn predicted(&self, check: &EvolutionCheck, aux: &AuxTerms<T>) -> Field<T> {
        match *check {
            EvolutionCheck::GeneralVariationRicci => self.general_variation_ricci(),
            EvolutionCheck::GeneralVariationScalar => self.general_variation_scalar(),
            EvolutionCheck::RicciEvolution => self.ricci_evolution(),
            EvolutionCheck::RicciNormEvolution => self.ricci_norm_evolution(),
            EvolutionCheck::ScalarEvolution => self.scalar_evolution(),
            EvolutionCheck::ShiftedRicciNormEvolution => self.shifted_ricci_norm_evolution(aux),
            EvolutionCheck::ShiftedScalarEvolution => self.shifted_scalar_evolution(aux),
            EvolutionCheck::PinchingEvolution { gamma } => self.pinching_evolution(aux, gamma),
        }
    }

    /// Fixed-state identities used in the derivations; none needs a time
    /// difference. `tol` is the relative spatial tolerance.
    pub fn cross_checks(
        &self,
        aux: &AuxTerms<T>,
        gammas: &[f64],
        tol: f64,
        algebraic: f64,
    ) -> Vec<CrossCheckResult> {
        let k = |x: f64| lit::<T>(x);
        let c = lit::<T>(self.c);
        let mut out = Vec::new();

        // double divergence of T̂ against its curvature expression
        let rhs37 = self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let ru = raise(self.b.ric.at(p), gi);
            dot(self.that().at(p), &ru) - self.rm_tt_at(p) + self.grad_t_square_at(p)
        });
        out.push(cross(
            "divergence_identity",
            &self.div_div_that,
            &rhs37,
            tol,
        ));

        // shifted norm evolution = norm evolution + (2c/7)·scalar evolution
        let l33 = self.ricci_norm_evolution();
        let l34 = self.scalar_evolution();
        let c35 = self.shifted_ricci_norm_evolution(aux);
        let combo = l33.plus_scaled(k(2.0 / 7.0) * c, &l34);
        out.push(cross("shifted_norm_vs_unshifted", &c35, &combo, tol));
        // the same with the scalar evolution in its divergence form, which is
        // what the shifted expressions are built from; still limited by the
        // discrete pair symmetry of Rm
        let l34_div = self.scalar(|p| {
            let r = self.b.scalar.at(p)[0];
            let ru = raise(self.b.ric.at(p), &self.m.at(p).g_inv);
            self.lap_r.at(p)[0] + k(2.0) * self.ric_norm.at(p)[0]
                - k(2.0 / 3.0) * r * r
                - k(4.0) * self.div_div_that.at(p)[0]
                + k(4.0) * dot(self.that().at(p), &ru)
        });
        let combo_div = l33.plus_scaled(k(2.0 / 7.0) * c, &l34_div);
        out.push(cross(
            "shifted_norm_vs_unshifted_divergence_form",
            &c35,
            &combo_div,
            tol,
        ));

        // shifted scalar evolution = scalar evolution: pure algebra in H
        let c36 = self.shifted_scalar_evolution(aux);
        out.push(cross("shifted_scalar_vs_unshifted", &c36, &l34, algebraic));

        // trace of the Ricci evolution: g^{ij}∂R_ij + 2S^{ij}R_ij = ∂R
        let l32 = self.ricci_evolution();
        let traced = self.scalar(|p| {
            let gi = &self.m.at(p).g_inv;
            let su = raise(self.s().at(p), gi);
            let mut tr = T::zero();
            for i in 0..7 {
                for j in 0..7 {
                    tr += gi[i][j] * l32.at(p)[i * 7 + j];
                }
            }
            tr + k(2.0) * dot(self.b.ric.at(p), &su)
        });
        out.push(cross("ricci_evolution_trace", &traced, &l34, tol));

        // Δ|Ric|² = 2R^{ij}ΔR_ij + 2|∇Ric|²
        let bochner = self.scalar(|p| {
            let ru = raise(self.b.ric.at(p), &self.m.at(p).g_inv);
            k(2.0) * dot(self.lap_ric.at(p), &ru)
                + k(2.0) * tensor::norm_sq_at(self.nabla_ric.at(p), 3, &self.m.at(p).g)
        });
        out.push(cross(
            "norm_laplacian_bookkeeping",
            &self.lap_ric_norm,
            &bochner,
            tol,
        ));

        // general variation with η = −2S reproduces the flow's Ricci evolution
        out.push(cross(
            "general_vs_flow_ricci",
            &self.general_variation_ricci(),
            &l32,
            tol,
        ));
        out.push(cross(
            "general_vs_flow_scalar",
            &self.general_variation_scalar(),
            &l34,
            tol,
        ));

        // the pinching evolution is the quotient rule applied to the two
        // shifted evolutions
        for &gamma in gammas {
            let gm = lit::<T>(gamma);
            let l41 = self.pinching_evolution(aux, gamma);
            let chain = self.scalar(|p| {
                let rt = self.rt.at(p)[0];
                let a = c35.at(p)[0];
                let b = c36.at(p)[0];
                a / rt.powf(gm)
                    - gm * self.rtic_norm.at(p)[0] * b / rt.powf(gm + T::one())
                    - (k(2.0) - gm) / k(7.0) * rt.powf(T::one() - gm) * b
            });
            out.push(cross(
                &format!("pinching_quotient_rule[gamma={gamma}]"),
                &l41,
                &chain,
                tol,
            ));
        }
        out
    }
}

fn cross<T: Real>(name: &str, a: &Field<T>, b: &Field<T>, tol: f64) -> CrossCheckResult {
    let scale = to_f64(a.max_abs().max(b.max_abs()));
    CrossCheckResult::new(name, to_f64(a.max_abs_diff(b)), scale, tol)
}

/// The quantity whose time derivative a check predicts.
pub fn observable<T: Real>(
    check: &EvolutionCheck,
    m: &MetricField<T>,
    b: &CurvatureBundle<T>,
    c: f64,
) -> Result<Field<T>, PinchingError> {
    Ok(match *check {
        EvolutionCheck::GeneralVariationRicci | EvolutionCheck::RicciEvolution => b.ric.clone(),
        EvolutionCheck::GeneralVariationScalar | EvolutionCheck::ScalarEvolution => {
            b.scalar.clone()
        }
        EvolutionCheck::RicciNormEvolution => tensor::norm_sq(&b.ric, 2, m),
        EvolutionCheck::ShiftedRicciNormEvolution => {
            let cs = lit::<T>(c) / lit(7.0);
            b.ric.map(1, |p, r, out| {
                let g = &m.at(p).g;
                let mut x = r.to_vec();
                for i in 0..7 {
                    for j in 0..7 {
                        x[i * 7 + j] += cs * g[i][j];
                    }
                }
                out[0] = tensor::norm_sq_at(&x, 2, g);
            })
        }
        EvolutionCheck::ShiftedScalarEvolution => {
            b.scalar.map(1, |_, r, out| out[0] = r[0] + lit(c))
        }
        EvolutionCheck::PinchingEvolution { gamma } => {
            pinching::pinching_f(b, m, &pinching::PinchingConfig { c, gamma })?
        }
    })
}

/// Residual fields (centred difference minus prediction) for every check on
/// three consecutive states, plus the finite difference and prediction maxima.
pub struct TripleResiduals<T> {
    pub residuals: Vec<Field<T>>,
    pub lhs_max: Vec<f64>,
    pub rhs_max: Vec<f64>,
    pub cross: Vec<CrossCheckResult>,
}

/// Evaluates every check on (prev, mid, next). Cross-checks are evaluated at
/// `mid` when `with_cross` is set.
pub fn check_triple<T: Real>(
    prev: &FlowState<T>,
    mid: &FlowState<T>,
    next: &FlowState<T>,
    checks: &[EvolutionCheck],
    c: f64,
    cross_tol: Option<(f64, f64, &[f64])>,
) -> Result<TripleResiduals<T>, VerifyError> {
    let dt2 = next.t() - prev.t();
    let outer = |s: &FlowState<T>| -> Result<Vec<Field<T>>, VerifyError> {
        let m = &s.structure()?.metric;
        let b = riemann(m);
        checks
            .iter()
            .map(|ch| Ok(observable(ch, m, &b, c)?))
            .collect()
    };
    let before = outer(prev)?;
    let after = outer(next)?;
    let ms = mid.structure()?;
    let mb = mid.curvature()?;
    let tf = mid.torsion()?;
    let terms = StateTerms::new(&ms.metric, mb, &tf.t, c)?;
    let aux = terms.aux();
    let mut out = TripleResiduals {
        residuals: Vec::new(),
        lhs_max: Vec::new(),
        rhs_max: Vec::new(),
        cross: Vec::new(),
    };
    for (k, ch) in checks.iter().enumerate() {
        let fd = after[k]
            .plus_scaled(-T::one(), &before[k])
            .scaled(T::one() / dt2);
        let pred = terms.predicted(ch, &aux);
        debug_assert_eq!(pred.ncomp(), ch.ncomp());
        out.lhs_max.push(to_f64(fd.max_abs()));
        out.rhs_max.push(to_f64(pred.max_abs()));
        out.residuals.push(fd.plus_scaled(-T::one(), &pred));
    }
    if let Some((tol, alg, gammas)) = cross_tol {
        out.cross = terms.cross_checks(&aux, gammas, tol, alg);
    }
    Ok(out)
}

/// Report of a dt-refinement verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub c: f64,
    pub dt: f64,
    pub h: f64,
    pub checks: Vec<EvolutionCheckResult>,
    pub cross_checks: Vec<CrossCheckResult>,
}

impl EvolutionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.cross_checks.iter().all(|c| c.passed)
    }
}

/// Runs each check around t* = dt on fixed-step trajectories with steps
/// dt, dt/2 and dt/4 from `start`, measuring the order in dt and the
/// Richardson-extrapolated residual.
pub fn verify_evolution<T: Real>(
    start: &FlowState<T>,
    dt: T,
    checks: &[EvolutionCheck],
    c: f64,
    gammas: &[f64],
    tol: &VerifyTolerances,
) -> Result<EvolutionReport, VerifyError> {
    let grid = start.phi().grid().clone();
    let h = to_f64(grid.h_max());
    let space_tol = tol.spatial(h);
    let mut levels = Vec::new();
    let mut cross = Vec::new();
    for k in [1usize, 2, 4] {
        let traj = fixed_trajectory(start.clone(), dt / lit(k as f64), k + 1)?;
        let with_cross = (k == 4).then_some((space_tol, tol.algebraic, gammas));
        let r = check_triple(&traj[k - 1], &traj[k], &traj[k + 1], checks, c, with_cross)?;
        if k == 4 {
            cross = r.cross.clone();
        }
        levels.push(r);
    }
    let results = checks
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            let (r1, r2, r3) = (
                &levels[0].residuals[i],
                &levels[1].residuals[i],
                &levels[2].residuals[i],
            );
            summarize(
                ch.name(),
                r1,
                r2,
                r3,
                levels[2].lhs_max[i],
                levels[2].rhs_max[i],
                space_tol,
                tol,
            )
        })
        .collect();
    Ok(EvolutionReport {
        c,
        dt: to_f64(dt),
        h,
        checks: results,
        cross_checks: cross,
    })
}

#[allow(clippy::too_many_arguments)]
fn summarize<T: Real>(
    name: String,
    r1: &Field<T>,
    r2: &Field<T>,
    r3: &Field<T>,
    lhs: f64,
    rhs: f64,
    space_tol: f64,
    tol: &VerifyTolerances,
) -> EvolutionCheckResult {
    let residual_max = to_f64(r3.max_abs());
    // r(dt) ≈ r₀ + a·dt², so r₀ ≈ r₃ + (r₃ − r₂)/3
    let extrap = r3.plus_scaled(lit(1.0 / 3.0), &r3.plus_scaled(-T::one(), r2));
    let residual_extrapolated = to_f64(extrap.max_abs());
    let scale = lhs.max(rhs);
    let is_static = scale <= tol.static_abs;
    let measured_time_order = if is_static {
        None
    } else {
        crate::flow::time_order(r1, r2, r3)
    };
    let (relative, tolerance, passed) = if is_static {
        (residual_max, tol.static_abs, residual_max <= tol.static_abs)
    } else {
        let rel = residual_extrapolated / scale;
        let ok = rel <= space_tol && measured_time_order.is_some_and(|o| o >= tol.min_time_order);
        (rel, space_tol, ok)
    };
    EvolutionCheckResult {
        name,
        lhs_fd: lhs,
        rhs,
        residual_max,
        residual_extrapolated,
        relative,
        tolerance,
        expected_order: (2.0, 4.0),
        measured_time_order,
        passed,
    }
}

// ---------------------------------------------------------------------------
// the pinching inequality

/// Step used for the directional derivative of f along the flow velocity.
pub const DIRECTIONAL_STEP: f64 = 1e-4;
/// Points with f below this fraction of max f are excluded from the ratio.
pub const PINCHING_FLOOR: f64 = 1e-12;

/// Least C ≥ 0 with ∂ₜf ≤ Δf + (2/R̃)⟨∇f,∇R̃⟩ + 4R̃f(−f/2 + C√f + C + C|W|²_{C¹}/R̃²)
/// at every grid point, for γ = 2. ∂ₜf is measured by a centred difference
/// of f along the flow velocity; |W|_{C¹} is the global maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalitySample {
    pub t: f64,
    pub minimal_c: f64,
    /// Unclamped max of (left side)/(C-coefficient); ≤ 0 means the
    /// inequality already holds with C = 0, and shows by how much.
    pub sup_ratio: f64,
    /// max of the left side over points excluded by the floor (must be ≤ 0
    /// up to rounding for the inequality to be satisfiable).
    pub excluded_excess: f64,
}

pub fn pinching_inequality_sample<T: Real>(
    state: &FlowState<T>,
    c: f64,
) -> Result<InequalitySample, VerifyError> {
    let s = state.structure()?;
    let b = state.curvature()?;
    let m = &s.metric;
    let cfg = pinching::PinchingConfig { c, gamma: 2.0 };
    let f = pinching::pinching_f(b, m, &cfg)?;
    let rt = pinching::shifted_scalar(b, c)?;
    let (_, wmax) = pinching::curvature_c1_norm(b.weyl.as_ref().expect("Weyl attached"), m);
    let v = rhs(state)?;
    let delta = lit::<T>(DIRECTIONAL_STEP);
    let f_at = |sign: T| -> Result<Field<T>, VerifyError> {
        let phi = s.phi.plus_scaled(sign * delta, &v);
        let st = StructureField::new(phi).map_err(|e| FlowError::PositivityLost {
            point: e.point(),
            t: to_f64(state.t()),
        })?;
        Ok(pinching::pinching_f(
            &riemann(&st.metric),
            &st.metric,
            &cfg,
        )?)
    };
    let fp = f_at(T::one())?;
    let fm = f_at(-T::one())?;
    let dfdt = fp
        .plus_scaled(-T::one(), &fm)
        .scaled(T::one() / (lit::<T>(2.0) * delta));
    let grad_f = tensor::covariant_derivative(&f, 0, m);
    let lap_f = tensor::laplacian_from_gradient(&grad_f, 0, m);
    let grad_r = tensor::covariant_derivative(&b.scalar, 0, m);
    let fmax = f.max();
    let two = lit::<T>(2.0);
    let mut best = T::neg_infinity();
    let mut excess = T::neg_infinity();
    for p in 0..f.grid().npoints() {
        let gi = &m.at(p).g_inv;
        let r = rt.at(p)[0];
        let fv = f.at(p)[0];
        let mut fr = T::zero();
        for a in 0..7 {
            for bb in 0..7 {
                fr += gi[a][bb] * grad_f.at(p)[a] * grad_r.at(p)[bb];
            }
        }
        let lhs = dfdt.at(p)[0] - lap_f.at(p)[0] - two / r * fr + two * r * fv * fv;
        if fv > lit::<T>(PINCHING_FLOOR) * fmax && fv > T::zero() {
            let den = lit::<T>(4.0) * r * fv * (fv.sqrt() + T::one() + wmax * wmax / (r * r));
            best = best.max(lhs / den);
        } else {
            excess = excess.max(lhs);
        }
    }
    Ok(InequalitySample {
        t: to_f64(state.t()),
        minimal_c: to_f64(best.max(T::zero())),
        sup_ratio: if best == T::neg_infinity() {
            0.0
        } else {
            to_f64(best)
        },
        excluded_excess: if excess == T::neg_infinity() {
            0.0
        } else {
            to_f64(excess)
        },
    })
}

/// max / median of a minimal-C series (1 for an all-zero series).
pub fn stability_ratio(series: &[f64]) -> f64 {
    if series.is_empty() {
        return 1.0;
    }
    let mut v = series.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let med = if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    };
    let mx = v[v.len() - 1];
    if mx == 0.0 {
        1.0
    } else if med > 0.0 {
        mx / med
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{suggested_dt, StepPolicy};
    use crate::grid::GridSpec;
    use crate::initial::{flat, perturbed, Perturbation};

    fn flat_state(n: usize) -> FlowState<f64> {
        FlowState::new(0.0, 0, flat(&GridSpec::with_active(&[0, 1], n).unwrap()))
    }

    #[test]
    fn flat_aux_values() {
        let s = flat_state(6);
        let st = s.structure().unwrap();
        let b = s.curvature().unwrap();
        let tf = s.torsion().unwrap();
        let terms = StateTerms::new(&st.metric, b, &tf.t, 1.0).unwrap();
        let aux = terms.aux();
        // R̃ = 1, |R̃ic|² = 1/7, no torsion
        let (rt, rn, c) = (1.0f64, 1.0 / 7.0, 1.0f64);
        let i = -4.0 / 3.0 * rt * rn + 16.0 * c / 21.0 * rn + 4.0 * c / 21.0 * rt * rt
            - 16.0 / 147.0 * c * c * rt;
        assert!((aux.i.max() - i).abs() < 1e-15 && (aux.i.min() - i).abs() < 1e-15);
        assert!((aux.h.max() + 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(aux.j.max_abs(), 0.0);
        // ∂R̃ = ΔR̃ + 2|R̃ic|² + H vanishes
        assert!(terms.shifted_scalar_evolution(&aux).max_abs() < 1e-15);
    }

    #[test]
    fn cubic_is_odd_and_pair_even() {
        let gi = linalg::identity::<f64>();
        let e: Vec<f64> = (0..49)
            .map(|k| {
                ((k / 7) as f64 - 3.0) * ((k % 7) as f64 - 3.0)
                    + if k / 7 == k % 7 { 0.5 } else { 0.0 }
            })
            .collect();
        let neg: Vec<f64> = e.iter().map(|x| -x).collect();
        let w: Vec<f64> = (0..2401).map(|k| ((k * 37) % 11) as f64 - 5.0).collect();
        assert!(cubic_trace(&e, &gi).abs() > 0.0);
        assert_eq!(cubic_trace(&neg, &gi), -cubic_trace(&e, &gi));
        assert_eq!(curvature_pair(&w, &neg, &gi), curvature_pair(&w, &e, &gi));
    }

    #[test]
    fn flat_trajectory_is_static() {
        let s = flat_state(8);
        let gammas = [1.5, 2.0, 3.0];
        let rep = verify_evolution(
            &s,
            1e-3,
            &EvolutionCheck::all(&gammas),
            1.0,
            &gammas,
            &VerifyTolerances::default(),
        )
        .unwrap();
        for r in &rep.checks {
            assert!(r.passed && r.measured_time_order.is_none(), "{r:?}");
        }
        for r in &rep.cross_checks {
            assert!(r.passed, "{r:?}");
        }
        assert!(rep.passed());
    }

    #[test]
    fn perturbed_checks_converge_in_time() {
        let grid = GridSpec::with_active(&[0, 1], 16).unwrap();
        let s = FlowState::new(0.0, 0, perturbed(&grid, &Perturbation::default()));
        let dt = suggested_dt(&s, &StepPolicy::default()).unwrap();
        let c = pinching::auto_shift(s.curvature().unwrap().scalar.min());
        let gammas = [1.5, 2.0, 3.0];
        let rep = verify_evolution(
            &s,
            dt,
            &EvolutionCheck::all(&gammas),
            c,
            &gammas,
            &VerifyTolerances::default(),
        )
        .unwrap();
        for r in &rep.checks {
            assert!(r.passed, "{r:?}");
            assert!(r.measured_time_order.unwrap() > 1.8);
        }
        for r in &rep.cross_checks {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn names_round_trip() {
        for ch in EvolutionCheck::all(&[1.5, 2.0]) {
            assert_eq!(EvolutionCheck::parse(&ch.name(), &[]).unwrap(), vec![ch]);
        }
        assert_eq!(
            EvolutionCheck::parse("pinching_evolution", &[2.0, 3.0])
                .unwrap()
                .len(),
            2
        );
        assert!(EvolutionCheck::parse("no_such_check", &[]).is_none());
    }

    #[test]
    fn stability_ratio_cases() {
        assert_eq!(stability_ratio(&[0.0, 0.0]), 1.0);
        assert_eq!(stability_ratio(&[1.0, 2.0, 4.0]), 2.0);
        assert!(stability_ratio(&[0.0, 0.0, 1.0]).is_infinite());
    }

    #[test]
    fn inequality_constant_flat_is_zero() {
        let s = flat_state(6);
        let r = pinching_inequality_sample(&s, 1.0).unwrap();
        assert_eq!(r.minimal_c, 0.0);
        assert!(r.excluded_excess.abs() < 1e-12);
    }
}

//! Torsion of a G2-structure field: the full torsion tensor from ∇φ, the
//! intrinsic torsion forms from dφ and dψ, and residuals of the structure
//! identities that tie torsion to curvature.

use crate::curvature::CurvatureBundle;
use crate::exterior::{FormK, DIM};
use crate::g2::{decompose_2form_with, decompose_3form_with, raise_slot};
use crate::grid::{Field, FormField};
use crate::linalg::{self, Mat7};
use crate::metric::MetricField;
use crate::scalar::{lit, Real};
use crate::tensor::{self, as_mat};

#[derive(Clone, Debug)]
pub struct TorsionField<T> {
    /// T_ij, 49 components.
    pub t: Field<T>,
    pub tau0: Field<T>,
    pub tau1: FormField<T>,
    pub tau2: FormField<T>,
    pub tau3: FormField<T>,
    /// ∇_iφ as seven 3-forms per point (derivative index major).
    pub nabla_phi: Field<T>,
}

/// ∇ of a k-form field, stored as seven k-forms per point:
/// ∇_i a = ∂_i a − Σ_p θ^p_i ∧ (e_p⌟a) with θ^p_i = Γ^p_il dx^l.
pub fn form_gradient<T: Real>(a: &FormField<T>, m: &MetricField<T>) -> Field<T> {
    let k = a.degree();
    let nc = DIM[k];
    let grid = a.grid().clone();
    let gam = m.christoffel();
    let data = a.field().data();
    Field::from_fn(&grid, 7 * nc, |p, out| {
        for i in 0..7 {
            grid.diff_all(data, nc, p, i, &mut out[i * nc..(i + 1) * nc]);
        }
        if k == 0 {
            return;
        }
        let ap = a.at(p);
        let gp = gam.at(p);
        let contr: Vec<FormK<T>> = (0..7).map(|q| ap.interior_basis(q)).collect();
        for i in 0..7 {
            let mut corr = FormK::zero(k);
            for (q, c) in contr.iter().enumerate() {
                let mut theta = [T::zero(); 7];
                for (l, th) in theta.iter_mut().enumerate() {
                    *th = gp[q * 49 + i * 7 + l];
                }
                if theta.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                let th = FormK::from_components(1, &theta).expect("7 components");
                corr = corr + th.wedge(c).expect("degree k");
            }
            for (o, &v) in out[i * nc..(i + 1) * nc].iter_mut().zip(corr.components()) {
                *o -= v;
            }
        }
    })
}

/// 7-form-major slice of a form gradient as a FormK.
pub fn gradient_slice<T: Real>(grad: &[T], degree: usize, i: usize) -> FormK<T> {
    let nc = DIM[degree];
    FormK::from_components(degree, &grad[i * nc..(i + 1) * nc]).expect("layout")
}

/// ⋆(α∧φ) = SIGN · α^♯⌟ψ for the orientation in use.
pub const STAR_WEDGE_PHI_SIGN: f64 = -1.0;

/// Full torsion T_ij = (1/24)∇_iφ_lmn ψ_j^{lmn} and the intrinsic forms
/// determined by dφ = τ₀ψ + 3τ₁∧φ + ⋆τ₃, dψ = 4τ₁∧ψ + τ₂∧φ.
pub fn torsion_from_phi<T: Real>(
    phi: &FormField<T>,
    psi: &FormField<T>,
    m: &MetricField<T>,
) -> TorsionField<T> {
    let grid = phi.grid().clone();
    let nabla_phi = form_gradient(phi, m);
    let dphi = phi.exterior_derivative();
    let dpsi = psi.exterior_derivative();
    // one pass per point: [T (49) | τ₀ | τ₁ (7) | τ₂ (21) | τ₃ (35)]
    let packed = Field::from_fn(&grid, 113, |p, out| {
        let mp = m.at(p);
        let inv = mp.inverse_minors_up_to(5);
        let (ph, ps) = (phi.at(p), psi.at(p));
        let gp = nabla_phi.at(p);
        let quarter = lit::<T>(0.25);
        for j in 0..7 {
            let y = ps.interior_basis(j).raised(&inv);
            for i in 0..7 {
                let s: T = gp[i * 35..(i + 1) * 35]
                    .iter()
                    .zip(y.components())
                    .map(|(&a, &b)| a * b)
                    .sum();
                out[i * 7 + j] = quarter * s;
            }
        }
        let star_dphi = dphi.at(p).star(&inv, mp.signed_vol());
        let dec = decompose_3form_with(&star_dphi, &ph, &ps, mp, &inv);
        out[49] = dec.f;
        // pi7 = 3⋆(τ₁∧φ) = 3·SIGN·τ₁^♯⌟ψ
        let s = lit::<T>(STAR_WEDGE_PHI_SIGN / 3.0);
        let w = linalg::mat_vec(&mp.g, &dec.x);
        let mut t1 = FormK::zero(1);
        for a in 0..7 {
            out[50 + a] = s * w[a];
            t1.components_mut()[a] = s * w[a];
        }
        // τ₂∧φ = −⋆τ₂ on Ω²₁₄, so τ₂ = −⋆(dψ − 4τ₁∧ψ), then projected.
        let rest = dpsi.at(p) - t1.wedge(&ps).expect("1+4").scaled(lit(4.0));
        let raw = rest.star(&inv, mp.signed_vol()).scaled(-T::one());
        out[57..78].copy_from_slice(decompose_2form_with(&raw, &ph, mp, &inv).pi14.components());
        out[78..113].copy_from_slice(dec.pi27.components());
    });
    let split = |lo: usize, hi: usize| {
        Field::from_fn(&grid, hi - lo, |p, o| {
            o.copy_from_slice(&packed.at(p)[lo..hi])
        })
    };
    let t = split(0, 49);
    let tau0 = split(49, 50);
    let tau1 = FormField::from_field(1, split(50, 57)).expect("7 components");
    let tau2 = FormField::from_field(2, split(57, 78)).expect("21 components");
    let tau3 = FormField::from_field(3, split(78, 113)).expect("35 components");
    TorsionField {
        t,
        tau0,
        tau1,
        tau2,
        tau3,
        nabla_phi,
    }
}

/// Dense φ_k^{mn} (first slot lower) at one point.
fn phi_raised_23<T: Real>(phi: &FormK<T>, gi: &Mat7<T>) -> Vec<T> {
    let d = phi.to_dense();
    raise_slot(&raise_slot(&d, 3, 1, gi), 3, 2, gi)
}

/// Per-point max of |a − b| over paired slices.
fn max_abs<T: Real>(xs: impl Iterator<Item = T>) -> T {
    xs.fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// max |∇_iφ_jkl − T_i^m ψ_mjkl|.
pub fn nabla_phi_residual<T: Real>(
    tf: &TorsionField<T>,
    psi: &FormField<T>,
    m: &MetricField<T>,
) -> T {
    let r = tf.nabla_phi.map(1, |p, g, out| {
        let ps = psi.at(p);
        let gi = &m.at(p).g_inv;
        let tm = as_mat(tf.t.at(p));
        let mut worst = T::zero();
        for i in 0..7 {
            let up = linalg::mat_vec(gi, &tm[i]);
            let rhs = ps.interior(&up).expect("degree 4");
            worst = worst.max(max_abs(
                g[i * 35..(i + 1) * 35]
                    .iter()
                    .zip(rhs.components())
                    .map(|(&a, &b)| a - b),
            ));
        }
        out[0] = worst;
    });
    r.max()
}

/// max |∇_mψ + T_m∧φ| where T_m is the 1-form T_{m·}.
pub fn nabla_psi_residual<T: Real>(
    phi: &FormField<T>,
    psi: &FormField<T>,
    t: &Field<T>,
    m: &MetricField<T>,
) -> T {
    let grad = form_gradient(psi, m);
    let r = grad.map(1, |p, g, out| {
        let ph = phi.at(p);
        let tm = as_mat(t.at(p));
        let mut worst = T::zero();
        for i in 0..7 {
            let ti = FormK::from_components(1, &tm[i]).expect("7");
            let rhs = ti.wedge(&ph).expect("1+3");
            worst = worst.max(max_abs(
                g[i * 35..(i + 1) * 35]
                    .iter()
                    .zip(rhs.components())
                    .map(|(&a, &b)| a + b),
            ));
        }
        out[0] = worst;
    });
    r.max()
}

/// max |g^{ab}∇_a τ_bj|.
pub fn tau_divergence_residual<T: Real>(tau2: &FormField<T>, m: &MetricField<T>) -> T {
    let dense = tau2.field().map(49, |_, c, out| {
        let f = FormK::from_components(2, c).expect("21");
        out.copy_from_slice(&f.to_dense());
    });
    tensor::divergence(&dense, 2, m).max_abs()
}

/// max |(∇_i∇_j − ∇_j∇_i)α_k + R_ijk^m α_m| for a 1-form field α.
pub fn ricci_identity_residual<T: Real>(alpha: &Field<T>, rm: &Field<T>, m: &MetricField<T>) -> T {
    let hess = tensor::second_covariant(alpha, 1, m);
    let r = hess.map(1, |p, h, out| {
        let gi = &m.at(p).g_inv;
        let a = alpha.at(p);
        let au = linalg::mat_vec(gi, &[a[0], a[1], a[2], a[3], a[4], a[5], a[6]]);
        let rp = rm.at(p);
        let mut worst = T::zero();
        for i in 0..7 {
            for j in 0..7 {
                for k in 0..7 {
                    // R_ijk^m α_m = R_ijkn α^n
                    let mut c = T::zero();
                    for n in 0..7 {
                        c += rp[((i * 7 + j) * 7 + k) * 7 + n] * au[n];
                    }
                    let v = h[(i * 7 + j) * 7 + k] - h[(j * 7 + i) * 7 + k] + c;
                    worst = worst.max(v.abs());
                }
            }
        }
        out[0] = worst;
    });
    r.max()
}

/// Contractions A_ij·φ_k^{..} used by several identities:
/// returns X_ijk = Σ_mn A[i][j][m][n] φ_k^{mn} for A given by a closure.
fn contract_phi<T: Real>(a: impl Fn(usize, usize, usize, usize) -> T, phu: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); 343];
    for i in 0..7 {
        for j in 0..7 {
            let mut blk = [T::zero(); 49];
            for m in 0..7 {
                for n in 0..7 {
                    blk[m * 7 + n] = a(i, j, m, n);
                }
            }
            for k in 0..7 {
                let mut s = T::zero();
                for q in 0..49 {
                    s += blk[q] * phu[k * 49 + q];
                }
                out[(i * 7 + j) * 7 + k] = s;
            }
        }
    }
    out
}

/// P_ijk = R_ijmn φ_k^{mn} and Q_ijk = T_im T_jn φ_k^{mn} at a point.
fn pq_at<T: Real>(rp: &[T], tm: &Mat7<T>, phu: &[T]) -> (Vec<T>, Vec<T>) {
    let pp = contract_phi(|i, j, m, n| rp[((i * 7 + j) * 7 + m) * 7 + n], phu);
    let qq = contract_phi(|i, j, m, n| tm[i][m] * tm[j][n], phu);
    (pp, qq)
}

/// Gradient of the torsion tensor, ∇_iT_jk with the derivative first.
pub fn nabla_t<T: Real>(t: &Field<T>, m: &MetricField<T>) -> Field<T> {
    tensor::covariant_derivative(t, 2, m)
}

/// max |∇_iT_jk − ∇_jT_ik + (½R_ijmn + T_imT_jn)φ_k^{mn}|.
pub fn bianchi_type_residual<T: Real>(
    t: &Field<T>,
    dt: &Field<T>,
    rm: &Field<T>,
    phi: &FormField<T>,
    m: &MetricField<T>,
) -> T {
    let half = lit::<T>(0.5);
    let r = t.map(1, |p, tp, out| {
        let phu = phi_raised_23(&phi.at(p), &m.at(p).g_inv);
        let (pp, qq) = pq_at(rm.at(p), &as_mat(tp), &phu);
        let d = dt.at(p);
        let mut worst = T::zero();
        for i in 0..7 {
            for j in 0..7 {
                for k in 0..7 {
                    let ijk = (i * 7 + j) * 7 + k;
                    let v = d[ijk] - d[(j * 7 + i) * 7 + k] + half * pp[ijk] + qq[ijk];
                    worst = worst.max(v.abs());
                }
            }
        }
        out[0] = worst;
    });
    r.max()
}

/// Right-hand side of the closed-structure expression for ∇_iT_jk in terms
/// of curvature and quadratic torsion, at one point (343 entries).
pub fn nabla_t_formula_at<T: Real>(rp: &[T], tm: &Mat7<T>, phi: &FormK<T>, gi: &Mat7<T>) -> Vec<T> {
    let phu = phi_raised_23(phi, gi);
    let (pp, qq) = pq_at(rp, tm, &phu);
    let (q4, h2) = (lit::<T>(0.25), lit::<T>(0.5));
    let mut out = vec![T::zero(); 343];
    let ix = |a: usize, b: usize, c: usize| (a * 7 + b) * 7 + c;
    for i in 0..7 {
        for j in 0..7 {
            for k in 0..7 {
                out[ix(i, j, k)] = -q4 * pp[ix(i, j, k)] - q4 * pp[ix(k, j, i)]
                    + q4 * pp[ix(i, k, j)]
                    - h2 * qq[ix(i, j, k)]
                    - h2 * qq[ix(k, j, i)]
                    + h2 * qq[ix(i, k, j)];
            }
        }
    }
    out
}

/// max |∇_iT_jk − formula_ijk|.
pub fn nabla_t_formula_residual<T: Real>(
    t: &Field<T>,
    dt: &Field<T>,
    rm: &Field<T>,
    phi: &FormField<T>,
    m: &MetricField<T>,
) -> T {
    let r = t.map(1, |p, tp, out| {
        let f = nabla_t_formula_at(rm.at(p), &as_mat(tp), &phi.at(p), &m.at(p).g_inv);
        out[0] = max_abs(dt.at(p).iter().zip(&f).map(|(&a, &b)| a - b));
    });
    r.max()
}

/// R_jk = −(∇_iT_jm)φ_k^{im} − T_j^i T_ik.
pub fn ricci_from_torsion<T: Real>(
    t: &Field<T>,
    dt: &Field<T>,
    phi: &FormField<T>,
    m: &MetricField<T>,
) -> Field<T> {
    t.map(49, |p, tp, out| {
        let gi = &m.at(p).g_inv;
        let phu = phi_raised_23(&phi.at(p), gi);
        let tm = as_mat(tp);
        let d = dt.at(p);
        let tt = linalg::matmul(&linalg::matmul(&tm, gi), &tm);
        for j in 0..7 {
            for k in 0..7 {
                let mut s = T::zero();
                for i in 0..7 {
                    for mm in 0..7 {
                        s += d[(i * 7 + j) * 7 + mm] * phu[(k * 7 + i) * 7 + mm];
                    }
                }
                out[j * 7 + k] = -s - tt[j][k];
            }
        }
    })
}

/// |T|² pointwise.
pub fn torsion_norm_sq<T: Real>(t: &Field<T>, m: &MetricField<T>) -> Field<T> {
    tensor::norm_sq(t, 2, m)
}

/// Max over the grid of |T_ij + T_ji|.
pub fn skew_residual<T: Real>(t: &Field<T>) -> T {
    let mut worst = T::zero();
    for p in 0..t.grid().npoints() {
        let x = t.at(p);
        for i in 0..7 {
            for j in 0..7 {
                worst = worst.max((x[i * 7 + j] + x[j * 7 + i]).abs());
            }
        }
    }
    worst
}

/// Max over the grid of |T + τ₂/2| (components of the 2-tensors).
pub fn t_tau2_residual<T: Real>(tf: &TorsionField<T>) -> T {
    let mut worst = T::zero();
    let h = lit::<T>(0.5);
    for p in 0..tf.t.grid().npoints() {
        let d = tf.tau2.at(p).to_dense();
        let x = tf.t.at(p);
        worst = worst.max(max_abs(x.iter().zip(&d).map(|(&a, &b)| a + h * b)));
    }
    worst
}

/// Max over the grid of |ψ∧τ₂|.
pub fn tau2_type_residual<T: Real>(tf: &TorsionField<T>, psi: &FormField<T>) -> T {
    let mut worst = T::zero();
    for p in 0..psi.grid().npoints() {
        worst = worst.max(psi.at(p).wedge(&tf.tau2.at(p)).expect("4+2").max_abs());
    }
    worst
}

/// Residuals of every structure identity for one state.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StructureResiduals {
    pub nabla_phi: f64,
    pub nabla_psi: f64,
    pub tau_divergence: f64,
    pub ricci_identity: f64,
    pub ricci_two_ways: f64,
    pub scalar_vs_torsion: f64,
    pub bianchi_type: f64,
    pub nabla_t_formula: f64,
    pub skew: f64,
    pub t_vs_tau2: f64,
}

impl StructureResiduals {
    pub fn named(&self) -> [(&'static str, f64); 10] {
        [
            ("nabla_phi", self.nabla_phi),
            ("nabla_psi", self.nabla_psi),
            ("tau_divergence", self.tau_divergence),
            ("ricci_identity", self.ricci_identity),
            ("ricci_two_ways", self.ricci_two_ways),
            ("scalar_vs_torsion", self.scalar_vs_torsion),
            ("bianchi_type", self.bianchi_type),
            ("nabla_t_formula", self.nabla_t_formula),
            ("skew", self.skew),
            ("t_vs_tau2", self.t_vs_tau2),
        ]
    }
}

/// A smooth 1-form probe used for the commutator identity.
pub fn probe_one_form<T: Real>(grid: &std::sync::Arc<crate::grid::GridSpec<T>>) -> Field<T> {
    let per = grid.periods();
    let tau = lit::<T>(std::f64::consts::TAU);
    Field::from_fn(grid, 7, |p, out| {
        let x = grid.coords(p);
        let mut s = T::zero();
        for a in 0..7 {
            s += tau * x[a] / per[a];
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = (s + lit(0.9 * k as f64)).sin() * lit(1.0 / (1 + k) as f64);
        }
    })
}

/// Evaluates all structure identities on a closed state.
pub fn structure_residuals<T: Real>(
    phi: &FormField<T>,
    psi: &FormField<T>,
    m: &MetricField<T>,
    tf: &TorsionField<T>,
    curv: &CurvatureBundle<T>,
) -> StructureResiduals {
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let dt = nabla_t(&tf.t, m);
    let ric_t = ricci_from_torsion(&tf.t, &dt, phi, m);
    let tn = torsion_norm_sq(&tf.t, m);
    let scalar = curv.scalar.plus_scaled(T::one(), &tn).max_abs();
    StructureResiduals {
        nabla_phi: f(nabla_phi_residual(tf, psi, m)),
        nabla_psi: f(nabla_psi_residual(phi, psi, &tf.t, m)),
        tau_divergence: f(tau_divergence_residual(&tf.tau2, m)),
        ricci_identity: f(ricci_identity_residual(
            &probe_one_form(phi.grid()),
            &curv.rm,
            m,
        )),
        ricci_two_ways: f(ric_t.max_abs_diff(&curv.ric)),
        scalar_vs_torsion: f(scalar),
        bianchi_type: f(bianchi_type_residual(&tf.t, &dt, &curv.rm, phi, m)),
        nabla_t_formula: f(nabla_t_formula_residual(&tf.t, &dt, &curv.rm, phi, m)),
        skew: f(skew_residual(&tf.t)),
        t_vs_tau2: f(t_tau2_residual(tf)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::riemann;
    use crate::g2::{standard_phi, standard_psi, G2Point};
    use crate::grid::GridSpec;
    use crate::initial::{flat, perturbed, Perturbation};
    use crate::metric::StructureField;

    #[test]
    fn star_wedge_phi_sign() {
        let pt = G2Point::<f64>::from_phi(&standard_phi()).unwrap();
        let psi = standard_psi::<f64>();
        for a in 0..7 {
            let mut e = [0.0; 7];
            e[a] = 1.0;
            let alpha = FormK::from_components(1, &e).unwrap();
            let lhs = pt.star(&alpha.wedge(&standard_phi()).unwrap());
            let rhs = psi.interior(&e).unwrap().scaled(STAR_WEDGE_PHI_SIGN);
            assert!((lhs - rhs).max_abs() < 1e-14);
        }
    }

    fn state(n: usize) -> (StructureField<f64>, TorsionField<f64>, CurvatureBundle<f64>) {
        let grid = GridSpec::with_active(&[0, 1], n).unwrap();
        let s = StructureField::new(perturbed(&grid, &Perturbation::default())).unwrap();
        let tf = torsion_from_phi(&s.phi, &s.psi, &s.metric);
        let c = riemann(&s.metric);
        (s, tf, c)
    }

    #[test]
    fn flat_has_no_torsion() {
        let grid = GridSpec::<f64>::with_active(&[0, 1], 8).unwrap();
        let s = StructureField::new(flat(&grid)).unwrap();
        let tf = torsion_from_phi(&s.phi, &s.psi, &s.metric);
        assert_eq!(tf.t.max_abs(), 0.0);
        assert_eq!(tf.tau2.max_abs(), 0.0);
    }

    #[test]
    fn closed_structure_has_only_tau2() {
        let (s, tf, _) = state(16);
        assert!(tf.t.max_abs() > 1e-3);
        assert!(tf.tau0.max_abs() < 1e-12);
        assert!(tf.tau1.max_abs() < 1e-12);
        assert!(tf.tau3.max_abs() < 1e-12);
        assert!(tau2_type_residual(&tf, &s.psi) < 1e-12);
    }

    #[test]
    fn identities_converge_at_fourth_order() {
        let (s1, t1, c1) = state(16);
        let (s2, t2, c2) = state(32);
        let r1 = structure_residuals(&s1.phi, &s1.psi, &s1.metric, &t1, &c1);
        let r2 = structure_residuals(&s2.phi, &s2.psi, &s2.metric, &t2, &c2);
        for ((name, a), (_, b)) in r1.named().iter().zip(r2.named()) {
            eprintln!("{name}: {a:.3e} {b:.3e} order {:.2}", (a / b).log2());
        }
        for ((name, a), (_, b)) in r1.named().iter().zip(r2.named()) {
            assert!(b < 1e-10 || (a / b).log2() > 3.5, "{name}: {a:e} -> {b:e}");
        }
    }
}

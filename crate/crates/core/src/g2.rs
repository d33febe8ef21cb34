//! G2-structures at a single tangent space: the model 3-form, the metric it
//! induces, and the type decompositions of 2- and 3-forms.

use thiserror::Error;

use crate::exterior::{FormK, Minors};
use crate::linalg::{self, Mat7};
use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum G2Error {
    #[error("3-form is not positive: {0}")]
    NotPositive(String),
    #[error("expected a {expected}-form, got degree {got}")]
    Degree { expected: usize, got: usize },
}

const PHI_TERMS: [(f64, [usize; 3]); 7] = [
    (1.0, [0, 1, 2]),
    (1.0, [0, 3, 4]),
    (1.0, [0, 5, 6]),
    (1.0, [1, 3, 5]),
    (-1.0, [1, 4, 6]),
    (-1.0, [2, 3, 6]),
    (-1.0, [2, 4, 5]),
];

const PSI_TERMS: [(f64, [usize; 4]); 7] = [
    (1.0, [3, 4, 5, 6]),
    (1.0, [1, 2, 5, 6]),
    (1.0, [1, 2, 3, 4]),
    (1.0, [0, 2, 4, 6]),
    (-1.0, [0, 2, 3, 5]),
    (-1.0, [0, 1, 4, 5]),
    (-1.0, [0, 1, 3, 6]),
];

/// e¹²³ + e¹⁴⁵ + e¹⁶⁷ + e²⁴⁶ − e²⁵⁷ − e³⁴⁷ − e³⁵⁶.
pub fn standard_phi<T: Real>() -> FormK<T> {
    let mut f = FormK::zero(3);
    for (c, idx) in PHI_TERMS {
        f.add_component(&idx, lit(c));
    }
    f
}

/// e⁴⁵⁶⁷ + e²³⁶⁷ + e²³⁴⁵ + e¹³⁵⁷ − e¹³⁴⁶ − e¹²⁵⁶ − e¹²⁴⁷, the dual 4-form.
pub fn standard_psi<T: Real>() -> FormK<T> {
    let mut f = FormK::zero(4);
    for (c, idx) in PSI_TERMS {
        f.add_component(&idx, lit(c));
    }
    f
}

/// Metric data at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricPoint<T> {
    pub g: Mat7<T>,
    pub g_inv: Mat7<T>,
    pub det_g: T,
    pub vol_coeff: T,
    /// +1 when the induced orientation agrees with dx¹∧…∧dx⁷.
    pub orientation: T,
}

impl<T: Real> MetricPoint<T> {
    pub fn from_metric(g: Mat7<T>) -> Result<Self, G2Error> {
        let (g_inv, det_g) = linalg::spd_inverse_det(&g)
            .ok_or_else(|| G2Error::NotPositive("metric is not positive-definite".into()))?;
        Ok(MetricPoint {
            g,
            g_inv,
            det_g,
            vol_coeff: det_g.sqrt(),
            orientation: T::one(),
        })
    }

    pub fn identity() -> Self {
        Self::from_metric(linalg::identity()).expect("identity is positive")
    }

    pub fn signed_vol(&self) -> T {
        self.orientation * self.vol_coeff
    }

    pub fn inverse_minors(&self) -> Minors<T> {
        self.inverse_minors_up_to(7)
    }

    /// Just the size-k minors of g⁻¹, enough to raise k-forms.
    pub fn minors_for_degree(&self, k: usize) -> Minors<T> {
        Minors::of_inverse_degree(&self.g, &self.g_inv, self.det_g, k)
    }

    /// Minors of g⁻¹ up to size k.
    pub fn inverse_minors_up_to(&self, k: usize) -> Minors<T> {
        Minors::of_inverse(&self.g, &self.g_inv, self.det_g, k)
    }
}

/// B(u,v) = (1/6)(u⌟φ)∧(v⌟φ)∧φ as coefficients of dx¹∧…∧dx⁷.
pub fn bilinear_form_b<T: Real>(phi: &FormK<T>) -> Mat7<T> {
    assert_eq!(phi.degree(), 3);
    let omega: Vec<FormK<T>> = (0..7).map(|i| phi.interior_basis(i)).collect();
    let with_phi: Vec<FormK<T>> = omega.iter().map(|w| w.wedge(phi).expect("2 + 3")).collect();
    let sixth = T::one() / lit(6.0);
    let mut b = linalg::zeros();
    for i in 0..7 {
        for j in i..7 {
            let top = omega[i].wedge(&with_phi[j]).expect("2 + 5");
            let v = top.components()[0] * sixth;
            b[i][j] = v;
            b[j][i] = v;
        }
    }
    b
}

/// The metric and orientation determined by a positive 3-form.
pub fn metric_from_phi<T: Real>(phi: &FormK<T>) -> Result<MetricPoint<T>, G2Error> {
    if phi.degree() != 3 {
        return Err(G2Error::Degree {
            expected: 3,
            got: phi.degree(),
        });
    }
    let mut b = bilinear_form_b(phi);
    let mut orientation = T::one();
    if linalg::det(&b) < T::zero() {
        b = linalg::scale(&b, -T::one());
        orientation = -T::one();
    }
    let (_, det_b) = linalg::spd_inverse_det(&b)
        .ok_or_else(|| G2Error::NotPositive("B_phi is not definite".into()))?;
    let factor = det_b.powf(-T::one() / lit(9.0));
    let mut m = MetricPoint::from_metric(linalg::scale(&b, factor))?;
    m.orientation = orientation;
    Ok(m)
}

pub fn hodge_star<T: Real>(a: &FormK<T>, m: &MetricPoint<T>) -> FormK<T> {
    a.star(&m.minors_for_degree(a.degree()), m.signed_vol())
}

/// φ with its dual 4-form, metric, and minors of g⁻¹ cached.
#[derive(Clone, Debug)]
pub struct G2Point<T> {
    pub phi: FormK<T>,
    pub psi: FormK<T>,
    pub metric: MetricPoint<T>,
    pub inv_minors: Minors<T>,
}

impl<T: Real> G2Point<T> {
    pub fn from_phi(phi: &FormK<T>) -> Result<Self, G2Error> {
        let metric = metric_from_phi(phi)?;
        let inv_minors = metric.inverse_minors();
        let psi = phi.star(&inv_minors, metric.signed_vol());
        Ok(G2Point {
            phi: *phi,
            psi,
            metric,
            inv_minors,
        })
    }

    pub fn star(&self, a: &FormK<T>) -> FormK<T> {
        a.star(&self.inv_minors, self.metric.signed_vol())
    }

    pub fn inner(&self, a: &FormK<T>, b: &FormK<T>) -> T {
        a.inner(b, &self.inv_minors)
    }

    /// Lowers a vector with g.
    pub fn lower(&self, v: &[T; 7]) -> [T; 7] {
        linalg::mat_vec(&self.metric.g, v)
    }

    /// Raises a covector with g⁻¹.
    pub fn raise(&self, w: &[T; 7]) -> [T; 7] {
        linalg::mat_vec(&self.metric.g_inv, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition2<T> {
    pub pi7: FormK<T>,
    pub pi14: FormK<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition3<T> {
    pub pi1: FormK<T>,
    pub pi7: FormK<T>,
    pub pi27: FormK<T>,
    /// Vector X with pi7 = X⌟ψ.
    pub x: [T; 7],
    /// Function f with pi1 = f·φ.
    pub f: T,
}

/// Splits β by the eigenvalues +2 and −1 of β ↦ ⋆(φ∧β).
pub fn decompose_2form<T: Real>(
    beta: &FormK<T>,
    phi: &FormK<T>,
    _psi: &FormK<T>,
    m: &MetricPoint<T>,
) -> Decomposition2<T> {
    decompose_2form_with(beta, phi, m, &m.minors_for_degree(5))
}

/// As [`decompose_2form`] with minors of g⁻¹ (up to size 5) supplied.
pub fn decompose_2form_with<T: Real>(
    beta: &FormK<T>,
    phi: &FormK<T>,
    m: &MetricPoint<T>,
    inv: &Minors<T>,
) -> Decomposition2<T> {
    let s = phi
        .wedge(beta)
        .expect("3 + 2 ≤ 7")
        .star(inv, m.signed_vol());
    let third = T::one() / lit(3.0);
    let pi7 = (*beta + s).scaled(third);
    let pi14 = (beta.scaled(lit(2.0)) - s).scaled(third);
    Decomposition2 { pi7, pi14 }
}

/// Splits η into multiples of φ, contractions X⌟ψ, and the remainder.
pub fn decompose_3form<T: Real>(
    eta: &FormK<T>,
    phi: &FormK<T>,
    psi: &FormK<T>,
    m: &MetricPoint<T>,
) -> Decomposition3<T> {
    decompose_3form_with(eta, phi, psi, m, &m.inverse_minors_up_to(3))
}

/// As [`decompose_3form`] with minors of g⁻¹ (up to size 3) supplied.
pub fn decompose_3form_with<T: Real>(
    eta: &FormK<T>,
    phi: &FormK<T>,
    psi: &FormK<T>,
    m: &MetricPoint<T>,
    inv: &Minors<T>,
) -> Decomposition3<T> {
    let f = eta.inner(phi, inv) / lit(7.0);
    let mut w = [T::zero(); 7];
    for (a, wa) in w.iter_mut().enumerate() {
        *wa = eta.inner(&psi.interior_basis(a), inv) / lit(4.0);
    }
    let x = linalg::mat_vec(&m.g_inv, &w);
    let pi1 = phi.scaled(f);
    let pi7 = psi.interior(&x).expect("degree 4");
    let pi27 = *eta - pi1 - pi7;
    Decomposition3 {
        pi1,
        pi7,
        pi27,
        x,
        f,
    }
}

/// Max residuals of the four quadratic contraction identities, absolute and
/// relative to the size of the right-hand sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionResiduals<T> {
    /// φ_ijk φ_abc g^{kc} = g_ia g_jb − g_ib g_ja + ψ_ijab
    pub phi_phi_one: T,
    /// φ_ijk φ_abc g^{jb} g^{kc} = 6 g_ia
    pub phi_phi_two: T,
    /// ψ_ijkl ψ_abcd g^{jb} g^{kc} g^{ld} = 24 g_ia
    pub psi_psi_three: T,
    /// φ_ijq ψ_abkl g^{ia} g^{jb} = 4 φ_qkl
    pub phi_psi_two: T,
    pub relative: [T; 4],
}

impl<T: Real> ContractionResiduals<T> {
    pub fn max_abs(&self) -> T {
        self.phi_phi_one
            .max(self.phi_phi_two)
            .max(self.psi_psi_three)
            .max(self.phi_psi_two)
    }

    pub fn max_relative(&self) -> T {
        self.relative.iter().fold(T::zero(), |m, &x| m.max(x))
    }
}

/// Contracts the last slot of a dense tensor (`len = pre·7`) with `m`.
fn raise_last<T: Real>(a: &[T], m: &Mat7<T>) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for (src, dst) in a.chunks_exact(7).zip(out.chunks_exact_mut(7)) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (0..7).map(|k| m[i][k] * src[k]).sum();
        }
    }
    out
}

pub fn verify_contraction_identities<T: Real>(
    phi: &FormK<T>,
) -> Result<ContractionResiduals<T>, G2Error> {
    let p = G2Point::from_phi(phi)?;
    let g = &p.metric.g;
    let gi = &p.metric.g_inv;
    let ph = phi.to_dense();
    let ps = p.psi.to_dense();
    let ph_up = raise_last(&ph, gi); // φ_ab^c

    let mut r = [T::zero(); 4];
    let mut scale = [T::zero(); 4];

    // φ_ijk φ_ab^k, reused for the double contraction
    let mut l = vec![T::zero(); 2401];
    for ij in 0..49 {
        for ab in 0..49 {
            let s: T = (0..7).map(|k| ph[ij * 7 + k] * ph_up[ab * 7 + k]).sum();
            l[ij * 49 + ab] = s;
        }
    }
    for i in 0..7 {
        for j in 0..7 {
            for a in 0..7 {
                for b in 0..7 {
                    let gg = g[i][a] * g[j][b] - g[i][b] * g[j][a];
                    let psi = ps[((i * 7 + j) * 7 + a) * 7 + b];
                    let rhs = gg + psi;
                    r[0] = r[0].max((l[(i * 7 + j) * 49 + a * 7 + b] - rhs).abs());
                    scale[0] = scale[0].max((g[i][a] * g[j][b]).abs()).max(psi.abs());
                }
            }
        }
    }
    for i in 0..7 {
        for a in 0..7 {
            let mut s = T::zero();
            for j in 0..7 {
                for b in 0..7 {
                    s += l[(i * 7 + j) * 49 + a * 7 + b] * gi[j][b];
                }
            }
            let rhs = lit::<T>(6.0) * g[i][a];
            r[1] = r[1].max((s - rhs).abs());
            scale[1] = scale[1].max(rhs.abs());
        }
    }

    // ψ_a^{jkl} by raising the last three slots
    let mut ps_up = ps.clone();
    for slot in 1..4 {
        ps_up = raise_slot(&ps_up, 4, slot, gi);
    }
    for i in 0..7 {
        for a in 0..7 {
            let s: T = (0..343).map(|r| ps[i * 343 + r] * ps_up[a * 343 + r]).sum();
            let rhs = lit::<T>(24.0) * g[i][a];
            r[2] = r[2].max((s - rhs).abs());
            scale[2] = scale[2].max(rhs.abs());
        }
    }

    // φ^{ab}_q with the first two slots raised
    let ph_uu = raise_slot(&raise_slot(&ph, 3, 0, gi), 3, 1, gi);
    for q in 0..7 {
        for k in 0..7 {
            for l2 in 0..7 {
                let mut s = T::zero();
                for ab in 0..49 {
                    s += ph_uu[ab * 7 + q] * ps[ab * 49 + k * 7 + l2];
                }
                let rhs = lit::<T>(4.0) * ph[(q * 7 + k) * 7 + l2];
                r[3] = r[3].max((s - rhs).abs());
                scale[3] = scale[3].max(rhs.abs());
            }
        }
    }
    let mut relative = [T::zero(); 4];
    for i in 0..4 {
        relative[i] = r[i] / scale[i].max(T::min_positive_value());
    }
    Ok(ContractionResiduals {
        phi_phi_one: r[0],
        phi_phi_two: r[1],
        psi_psi_three: r[2],
        phi_psi_two: r[3],
        relative,
    })
}

/// Worst-case outcome of the contraction identities over random linear
/// pullbacks of the standard φ.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PullbackSuite {
    pub count: usize,
    /// Largest relative contraction residual over all samples.
    pub max_relative: f64,
    /// Largest |g(u*φ) − uᵀu| relative to |uᵀu|.
    pub max_metric_mismatch: f64,
    /// Samples with det u < 0 (orientation reversed).
    pub reversed: usize,
}

/// Condition-number cap for the random maps (|u||u⁻¹| ≤ 10).
pub const PULLBACK_MAX_CONDITION: f64 = 10.0;

/// Draws `count` maps u = I + M (M uniform in [−0.5, 0.5]), flips the first
/// row of about half of them, rejects maps with condition number above
/// [`PULLBACK_MAX_CONDITION`], and checks u*φ.
pub fn pullback_suite(seed: u64, count: usize) -> Result<PullbackSuite, G2Error> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let phi = standard_phi::<f64>();
    let mut out = PullbackSuite {
        count,
        ..Default::default()
    };
    let mut done = 0;
    while done < count {
        let mut u = linalg::identity::<f64>();
        for row in u.iter_mut() {
            for x in row.iter_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
        let flip = rng.gen_bool(0.5);
        if flip {
            u[0].iter_mut().for_each(|x| *x = -*x);
        }
        let utu = linalg::matmul(&linalg::transpose(&u), &u);
        let ev = linalg::sym_eigenvalues(&utu);
        if ev[6] > PULLBACK_MAX_CONDITION.powi(2) * ev[0] {
            continue;
        }
        let pulled = phi.pullback(&u);
        let r = verify_contraction_identities(&pulled)?;
        out.max_relative = out.max_relative.max(r.max_relative());
        let m = metric_from_phi(&pulled)?;
        out.max_metric_mismatch = out
            .max_metric_mismatch
            .max(linalg::max_abs_diff(&m.g, &utu) / linalg::max_abs(&utu));
        if m.orientation < 0.0 {
            out.reversed += 1;
        }
        done += 1;
    }
    Ok(out)
}

/// Contracts one slot of a dense rank-`rank` tensor with the matrix `m`:
/// out[..i..] = Σ_k m[i][k] a[..k..].
pub fn raise_slot<T: Real>(a: &[T], rank: usize, slot: usize, m: &Mat7<T>) -> Vec<T> {
    let post = 7usize.pow((rank - slot - 1) as u32);
    let pre = a.len() / (7 * post);
    let mut out = vec![T::zero(); a.len()];
    for p in 0..pre {
        let base = p * 7 * post;
        for i in 0..7 {
            let dst = base + i * post;
            for k in 0..7 {
                let c = m[i][k];
                if c == T::zero() {
                    continue;
                }
                let src = base + k * post;
                for q in 0..post {
                    out[dst + q] += c * a[src + q];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_phi_components() {
        let phi = standard_phi::<f64>();
        assert_eq!(phi.get(&[0, 1, 2]), 1.0);
        assert_eq!(phi.get(&[1, 4, 6]), -1.0);
        assert_eq!(phi.get(&[1, 0, 2]), -1.0);
        assert_eq!(phi.components().iter().filter(|x| **x != 0.0).count(), 7);
    }

    #[test]
    fn b_of_standard_phi_is_identity() {
        let b = bilinear_form_b(&standard_phi::<f64>());
        assert_eq!(b, linalg::identity());
    }

    #[test]
    fn standard_metric_is_identity() {
        let m = metric_from_phi(&standard_phi::<f64>()).unwrap();
        assert!(linalg::max_abs_diff(&m.g, &linalg::identity()) < 1e-15);
        assert_eq!(m.vol_coeff, 1.0);
        assert_eq!(m.orientation, 1.0);
    }

    #[test]
    fn star_phi_is_psi() {
        let phi = standard_phi::<f64>();
        let psi = hodge_star(&phi, &MetricPoint::identity());
        assert_eq!(psi, standard_psi());
    }

    #[test]
    fn degenerate_phi_rejected() {
        let phi = FormK::<f64>::from_terms(3, &[(1.0, &[0, 1, 2])]);
        let b = bilinear_form_b(&phi);
        assert!(linalg::det(&b).abs() < 1e-300);
        assert!(matches!(
            metric_from_phi(&phi),
            Err(G2Error::NotPositive(_))
        ));
    }

    #[test]
    fn negated_phi_flips_orientation_only() {
        let phi = -standard_phi::<f64>();
        let p = G2Point::from_phi(&phi).unwrap();
        assert_eq!(p.metric.orientation, -1.0);
        assert!(linalg::max_abs_diff(&p.metric.g, &linalg::identity()) < 1e-15);
        assert_eq!(p.psi, standard_psi());
    }

    #[test]
    fn contraction_identities_exact_on_standard() {
        let r = verify_contraction_identities(&standard_phi::<f64>()).unwrap();
        assert!(r.max_abs() <= 1e-12, "{r:?}");
    }

    #[test]
    fn single_precision_standard_metric() {
        let m = metric_from_phi(&standard_phi::<f32>()).unwrap();
        assert!(linalg::max_abs_diff(&m.g, &linalg::identity()) < 1e-6);
    }
}

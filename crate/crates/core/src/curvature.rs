//! Riemann curvature of a metric field and its algebraic decomposition.

use crate::exterior::{basis, Minors};
use crate::grid::Field;
use crate::linalg::Mat7;
use crate::metric::MetricField;
use crate::scalar::{lit, Real};
use crate::tensor::{self, as_mat};

/// Curvature data on every grid point. Rank-4 fields store R_ijkl
/// row-major (2401 components), 2-tensors 49 components.
#[derive(Clone, Debug)]
pub struct CurvatureBundle<T> {
    pub rm: Field<T>,
    pub ric: Field<T>,
    pub scalar: Field<T>,
    pub einstein: Field<T>,
    /// Trace-free Weyl tensor.
    pub weyl: Option<Field<T>>,
    /// S_ij = R_ij + |T|²g_ij/3 + 2T̂_ij.
    pub flow_tensor: Option<Field<T>>,
    /// T̂_ij = T_i^k T_kj.
    pub t_hat: Option<Field<T>>,
}

/// |A|² of a rank-4 tensor through its Λ²⊗Λ² block: A is skew-symmetrised
/// in the last pair and read on i<j, k<l, so only the skew part counts.
pub fn lambda2_norm_sq_at<T: Real>(a: &[T], g: &Mat7<T>) -> T {
    let masks = basis().masks(2);
    let pair = |m: u8| {
        let i = m.trailing_zeros() as usize;
        (i, (m & !(1 << i)).trailing_zeros() as usize)
    };
    let half = lit::<T>(0.5);
    let mut b = [[T::zero(); 21]; 21];
    for (r, &mr) in masks.iter().enumerate() {
        let (i, j) = pair(mr);
        for (c, &mc) in masks.iter().enumerate() {
            let (k, l) = pair(mc);
            let base = (i * 7 + j) * 49;
            b[r][c] = half * (a[base + k * 7 + l] - a[base + l * 7 + k]);
        }
    }
    let f2 = Minors::up_to(&tensor::frame(g), 2);
    let f2 = f2.table(2);
    let mut tmp = [[T::zero(); 21]; 21];
    for r in 0..21 {
        for c in 0..21 {
            tmp[r][c] = (0..21).fold(T::zero(), |s, q| s + f2[r * 21 + q] * b[q][c]);
        }
    }
    let mut n = T::zero();
    for r in 0..21 {
        for c in 0..21 {
            let v = (0..21).fold(T::zero(), |s, q| s + tmp[r][q] * f2[c * 21 + q]);
            n += v * v;
        }
    }
    lit::<T>(4.0) * n
}

/// R_ijk^l = ∂_iΓ^l_jk − ∂_jΓ^l_ik + Γ^m_jk Γ^l_im − Γ^m_ik Γ^l_jm, lowered
/// with g_lm, together with Ric_jk = g^{il}R_ijkl, R and E = Ric − (R/7)g.
pub fn riemann<T: Real>(m: &MetricField<T>) -> CurvatureBundle<T> {
    let grid = m.grid().clone();
    let gam = m.christoffel();
    let gdata = gam.data();
    let active = grid.active_axes().to_vec();
    let rm = Field::from_fn(&grid, 2401, |p, out| {
        let mut dg = vec![[T::zero(); 343]; 7];
        for &a in &active {
            grid.diff_all(gdata, 343, p, a, &mut dg[a]);
        }
        let gp = gam.at(p);
        let g = &m.at(p).g;
        let mut up = [T::zero(); 7];
        for i in 0..7 {
            for j in (i + 1)..7 {
                for k in 0..7 {
                    for (l, u) in up.iter_mut().enumerate() {
                        let mut v = dg[i][l * 49 + j * 7 + k] - dg[j][l * 49 + i * 7 + k];
                        for q in 0..7 {
                            v += gp[q * 49 + j * 7 + k] * gp[l * 49 + i * 7 + q]
                                - gp[q * 49 + i * 7 + k] * gp[l * 49 + j * 7 + q];
                        }
                        *u = v;
                    }
                    for l in 0..7 {
                        let mut s = T::zero();
                        for q in 0..7 {
                            s += g[l][q] * up[q];
                        }
                        out[((i * 7 + j) * 7 + k) * 7 + l] = s;
                        out[((j * 7 + i) * 7 + k) * 7 + l] = -s;
                    }
                }
            }
        }
    });
    let ric = ricci_from_rm(&rm, m);
    let scalar = crate::tensor::trace(&ric, m);
    let einstein = ric.map(49, |p, r, out| {
        let g = &m.at(p).g;
        let s = scalar.at(p)[0] / lit(7.0);
        for i in 0..7 {
            for j in 0..7 {
                out[i * 7 + j] = r[i * 7 + j] - s * g[i][j];
            }
        }
    });
    CurvatureBundle {
        rm,
        ric,
        scalar,
        einstein,
        weyl: None,
        flow_tensor: None,
        t_hat: None,
    }
}

impl<T: Real> CurvatureBundle<T> {
    /// Fills T̂ and S from the torsion tensor.
    pub fn attach_torsion(&mut self, t: &Field<T>, m: &MetricField<T>) {
        let t_hat = t.map(49, |p, x, out| {
            let tm = as_mat(x);
            let th = crate::linalg::matmul(&crate::linalg::matmul(&tm, &m.at(p).g_inv), &tm);
            crate::tensor::write_mat(&th, out);
        });
        let tn = crate::tensor::norm_sq(t, 2, m);
        let third = T::one() / lit(3.0);
        let s = self.ric.map(49, |p, r, out| {
            let g = &m.at(p).g;
            let th = t_hat.at(p);
            let a = tn.at(p)[0] * third;
            for i in 0..7 {
                for j in 0..7 {
                    out[i * 7 + j] = r[i * 7 + j] + a * g[i][j] + lit::<T>(2.0) * th[i * 7 + j];
                }
            }
        });
        self.t_hat = Some(t_hat);
        self.flow_tensor = Some(s);
    }

    /// Fills the trace-free Weyl tensor and returns the literal-form discrepancy.
    pub fn attach_weyl(&mut self, m: &MetricField<T>) -> T {
        let w = weyl(self, m);
        self.weyl = Some(w.trace_free);
        w.discrepancy
    }
}

/// Ric_jk = g^{il} R_ijkl.
pub fn ricci_from_rm<T: Real>(rm: &Field<T>, m: &MetricField<T>) -> Field<T> {
    rm.map(49, |p, r, out| {
        let gi = &m.at(p).g_inv;
        for j in 0..7 {
            for k in 0..7 {
                let mut s = T::zero();
                for i in 0..7 {
                    for l in 0..7 {
                        s += gi[i][l] * r[((i * 7 + j) * 7 + k) * 7 + l];
                    }
                }
                out[j * 7 + k] = s;
            }
        }
    })
}

/// (α∘β)_ijkl = α_il β_jk + α_jk β_il − α_ik β_jl − α_jl β_ik.
pub fn kulkarni_nomizu<T: Real>(a: &Mat7<T>, b: &Mat7<T>) -> Vec<T> {
    let mut out = vec![T::zero(); 2401];
    kulkarni_nomizu_into(a, b, T::one(), &mut out);
    out
}

/// out += s·(α∘β).
pub fn kulkarni_nomizu_into<T: Real>(a: &Mat7<T>, b: &Mat7<T>, s: T, out: &mut [T]) {
    for i in 0..7 {
        for j in 0..7 {
            for k in 0..7 {
                for l in 0..7 {
                    let v = a[i][l] * b[j][k] + a[j][k] * b[i][l]
                        - a[i][k] * b[j][l]
                        - a[j][l] * b[i][k];
                    out[((i * 7 + j) * 7 + k) * 7 + l] += s * v;
                }
            }
        }
    }
}

/// Both Weyl fields: the trace-free W' = Rm − (R/84)g∘g − (1/5)E∘g, and the
/// literal three-term expression Rm − (1/5)Ric∘g + (1/30)(g_il g_jk − g_ik g_jl),
/// whose last term carries no factor of R.
#[derive(Clone, Debug)]
pub struct WeylPair<T> {
    pub trace_free: Field<T>,
    pub literal: Field<T>,
    /// max |literal − trace_free| over the grid.
    pub discrepancy: T,
}

pub fn weyl<T: Real>(b: &CurvatureBundle<T>, m: &MetricField<T>) -> WeylPair<T> {
    let trace_free = b.rm.map(2401, |p, r, out| {
        out.copy_from_slice(r);
        let g = &m.at(p).g;
        let e = as_mat(b.einstein.at(p));
        let rs = b.scalar.at(p)[0];
        kulkarni_nomizu_into(g, g, -rs / lit(84.0), out);
        kulkarni_nomizu_into(&e, g, -T::one() / lit(5.0), out);
    });
    let literal = b.rm.map(2401, |p, r, out| {
        out.copy_from_slice(r);
        let g = &m.at(p).g;
        let ric = as_mat(b.ric.at(p));
        kulkarni_nomizu_into(&ric, g, -T::one() / lit(5.0), out);
        let c = T::one() / lit(30.0);
        for i in 0..7 {
            for j in 0..7 {
                for k in 0..7 {
                    for l in 0..7 {
                        out[((i * 7 + j) * 7 + k) * 7 + l] +=
                            c * (g[i][l] * g[j][k] - g[i][k] * g[j][l]);
                    }
                }
            }
        }
    });
    let discrepancy = literal.max_abs_diff(&trace_free);
    WeylPair {
        trace_free,
        literal,
        discrepancy,
    }
}

/// Max over the grid of |g^{il}W_ijkl|.
pub fn weyl_trace_residual<T: Real>(w: &Field<T>, m: &MetricField<T>) -> T {
    ricci_from_rm(w, m).max_abs()
}

/// Max residual of the pair/skew symmetries and the first Bianchi identity.
pub fn curvature_symmetry_residual<T: Real>(rm: &Field<T>) -> T {
    let mut worst = T::zero();
    for p in 0..rm.grid().npoints() {
        let r = rm.at(p);
        let at = |i: usize, j: usize, k: usize, l: usize| r[((i * 7 + j) * 7 + k) * 7 + l];
        for i in 0..7 {
            for j in 0..7 {
                for k in 0..7 {
                    for l in 0..7 {
                        let x = at(i, j, k, l);
                        worst = worst
                            .max((x + at(j, i, k, l)).abs())
                            .max((x + at(i, j, l, k)).abs())
                            .max((x - at(k, l, i, j)).abs())
                            .max((x + at(j, k, i, l) + at(k, i, j, l)).abs());
                    }
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::linalg;

    #[test]
    fn lambda2_norm_matches_dense_on_curvature_type() {
        let mut g = linalg::identity::<f64>();
        let mut h = linalg::identity::<f64>();
        for i in 0..7 {
            for j in 0..7 {
                g[i][j] += 0.05 * ((i + j) as f64).cos();
                h[i][j] = ((i * j) as f64 * 0.3).sin() + ((i * j) as f64 * 0.3).sin();
            }
        }
        let a = kulkarni_nomizu(&h, &g);
        let dense = tensor::norm_sq_at(&a, 4, &g);
        assert!(
            (lambda2_norm_sq_at(&a, &g) - dense).abs() < 1e-10 * dense,
            "{dense}"
        );
    }

    #[test]
    fn kn_of_identity() {
        let g = linalg::identity::<f64>();
        let k = kulkarni_nomizu(&g, &g);
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for i in 0..7 {
            for j in 0..7 {
                for kk in 0..7 {
                    for l in 0..7 {
                        let e = 2.0 * (d(i, l) * d(j, kk) - d(i, kk) * d(j, l));
                        assert_eq!(k[((i * 7 + j) * 7 + kk) * 7 + l], e);
                    }
                }
            }
        }
    }

    #[test]
    fn kn_trace_gives_five_e() {
        // g^{il}(E∘g)_ijkl = 5 E_jk for trace-free E in dimension 7
        let mut e = linalg::zeros::<f64>();
        for i in 0..7 {
            for j in 0..7 {
                e[i][j] = ((i + j) as f64 * 0.7).sin();
            }
        }
        let tr = (0..7).map(|i| e[i][i]).sum::<f64>() / 7.0;
        for i in 0..7 {
            e[i][i] -= tr;
        }
        let g = linalg::identity();
        let k = kulkarni_nomizu(&e, &g);
        for j in 0..7 {
            for kk in 0..7 {
                let s: f64 = (0..7).map(|i| k[((i * 7 + j) * 7 + kk) * 7 + i]).sum();
                assert!((s - 5.0 * e[j][kk]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn flat_metric_has_no_curvature() {
        let grid = GridSpec::<f64>::with_active(&[0, 1], 8).unwrap();
        let m = MetricField::from_fn(&grid, |_| linalg::identity()).unwrap();
        let b = riemann(&m);
        assert_eq!(b.rm.max_abs(), 0.0);
        assert_eq!(weyl(&b, &m).trace_free.max_abs(), 0.0);
    }

    #[test]
    fn warped_metric_scalar_curvature() {
        // g = dx₁² + e^{2u(x₁)} Σ_{i>1} dx_i²: R = −12u'' − 42u'²
        let err = |n: usize| {
            let grid = GridSpec::<f64>::with_active(&[0], n).unwrap();
            let m = MetricField::from_fn(&grid, |p| {
                let u = 0.2 * grid.coords(p)[0].sin();
                let mut g = linalg::scale(&linalg::identity(), (2.0 * u).exp());
                g[0][0] = 1.0;
                g
            })
            .unwrap();
            let b = riemann(&m);
            let mut e: f64 = 0.0;
            for p in 0..grid.npoints() {
                let x = grid.coords(p)[0];
                let (du, ddu) = (0.2 * x.cos(), -0.2 * x.sin());
                let exact = -12.0 * ddu - 42.0 * du * du;
                e = e.max((b.scalar.at(p)[0] - exact).abs());
            }
            e
        };
        let (a, b) = (err(16), err(32));
        assert!((a / b).log2() > 3.7, "{a} {b}");
    }

    fn sample_metric(n: usize) -> MetricField<f64> {
        let grid = GridSpec::<f64>::with_active(&[0, 2], n).unwrap();
        MetricField::from_fn(&grid, |p| {
            let x = grid.coords(p);
            let mut g = linalg::identity();
            g[1][1] = 1.0 + 0.3 * x[0].sin();
            g[4][6] = 0.2 * (x[2] - x[0]).cos();
            g[6][4] = g[4][6];
            g
        })
        .unwrap()
    }

    #[test]
    fn einstein_is_trace_free() {
        let m = sample_metric(12);
        let b = riemann(&m);
        assert!(crate::tensor::trace(&b.einstein, &m).max_abs() < 1e-12);
        let w = weyl(&b, &m);
        assert!(weyl_trace_residual(&w.trace_free, &m) < 1e-10);
    }

    #[test]
    fn symmetries_converge() {
        // pair symmetry and Bianchi hold only up to truncation error
        let a = curvature_symmetry_residual(&riemann(&sample_metric(12)).rm);
        let b = curvature_symmetry_residual(&riemann(&sample_metric(24)).rm);
        assert!((a / b).log2() > 3.5, "{a} {b}");
    }
}

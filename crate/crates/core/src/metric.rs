//! Metric fields: the pointwise metric of a G2-structure field, the
//! Levi-Civita connection, Hodge star, codifferential and L² pairings.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use thiserror::Error;

use crate::exterior::FormK;
use crate::g2::{metric_from_phi, MetricPoint};
use crate::grid::{Field, FormField, GridSpec};
use crate::linalg::Mat7;
use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("3-form is not positive at grid point {index:?}")]
    NotPositive { point: usize, index: [usize; 7] },
    #[error("metric is not positive-definite at grid point {index:?}")]
    MetricNotPositive { point: usize, index: [usize; 7] },
}

impl StructureError {
    pub fn point(&self) -> usize {
        match self {
            StructureError::NotPositive { point, .. }
            | StructureError::MetricNotPositive { point, .. } => *point,
        }
    }
}

/// Index of Γ^k_ij in a 343-component Christoffel array.
#[inline(always)]
pub fn gamma_index(k: usize, i: usize, j: usize) -> usize {
    k * 49 + i * 7 + j
}

#[derive(Clone, Debug)]
pub struct MetricField<T> {
    grid: Arc<GridSpec<T>>,
    points: Vec<MetricPoint<T>>,
    christoffel: OnceLock<Field<T>>,
}

fn first_error<T, E: Clone>(results: Vec<Result<T, E>>) -> Result<Vec<T>, E> {
    results.into_iter().collect()
}

impl<T: Real> MetricField<T> {
    pub fn from_points(grid: &Arc<GridSpec<T>>, points: Vec<MetricPoint<T>>) -> Self {
        assert_eq!(points.len(), grid.npoints());
        MetricField {
            grid: grid.clone(),
            points,
            christoffel: OnceLock::new(),
        }
    }

    /// Metric from explicit matrices, e.g. analytic test metrics.
    pub fn from_fn<F>(grid: &Arc<GridSpec<T>>, f: F) -> Result<Self, StructureError>
    where
        F: Fn(usize) -> Mat7<T> + Sync,
    {
        let pts: Vec<_> = (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                MetricPoint::from_metric(f(p)).map_err(|_| StructureError::MetricNotPositive {
                    point: p,
                    index: grid.multi_index(p),
                })
            })
            .collect();
        Ok(Self::from_points(grid, first_error(pts)?))
    }

    /// The metric induced by a 3-form field at every point.
    pub fn from_phi(phi: &FormField<T>) -> Result<Self, StructureError> {
        assert_eq!(phi.degree(), 3);
        let grid = phi.grid().clone();
        let pts: Vec<_> = (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                metric_from_phi(&phi.at(p)).map_err(|_| StructureError::NotPositive {
                    point: p,
                    index: grid.multi_index(p),
                })
            })
            .collect();
        Ok(Self::from_points(&grid, first_error(pts)?))
    }

    pub fn grid(&self) -> &Arc<GridSpec<T>> {
        &self.grid
    }

    pub fn points(&self) -> &[MetricPoint<T>] {
        &self.points
    }

    #[inline]
    pub fn at(&self, p: usize) -> &MetricPoint<T> {
        &self.points[p]
    }

    /// Dense g_ij as a 49-component field.
    pub fn metric_tensor(&self) -> Field<T> {
        Field::from_fn(&self.grid, 49, |p, out| {
            let g = &self.points[p].g;
            for i in 0..7 {
                out[i * 7..i * 7 + 7].copy_from_slice(&g[i]);
            }
        })
    }

    /// Γ^k_ij = ½ g^{kl}(∂_i g_jl + ∂_j g_il − ∂_l g_ij), cached.
    pub fn christoffel(&self) -> &Field<T> {
        self.christoffel.get_or_init(|| {
            let g = self.metric_tensor();
            let grid = &self.grid;
            let data = g.data();
            let active = grid.active_axes().to_vec();
            Field::from_fn(grid, 343, |p, out| {
                let mut dg = [[T::zero(); 49]; 7];
                for &a in &active {
                    grid.diff_all(data, 49, p, a, &mut dg[a]);
                }
                let half = lit::<T>(0.5);
                let mut lower = [T::zero(); 343]; // Γ_{l,ij}
                for l in 0..7 {
                    for i in 0..7 {
                        for j in i..7 {
                            let v = half * (dg[i][j * 7 + l] + dg[j][i * 7 + l] - dg[l][i * 7 + j]);
                            lower[l * 49 + i * 7 + j] = v;
                            lower[l * 49 + j * 7 + i] = v;
                        }
                    }
                }
                let gi = &self.points[p].g_inv;
                for k in 0..7 {
                    for ij in 0..49 {
                        let mut s = T::zero();
                        for l in 0..7 {
                            s += gi[k][l] * lower[l * 49 + ij];
                        }
                        out[k * 49 + ij] = s;
                    }
                }
            })
        })
    }

    /// Riemannian volume Σ √det g · cell volume.
    pub fn volume(&self) -> T {
        self.points.iter().fold(T::zero(), |s, m| s + m.vol_coeff) * self.grid.cell_volume()
    }

    /// Hodge star of a form field.
    pub fn hodge_star(&self, a: &FormField<T>) -> FormField<T> {
        let k = a.degree();
        a.map(7 - k, |p, f| {
            let m = &self.points[p];
            let minors = m.minors_for_degree(k);
            f.star(&minors, m.signed_vol())
        })
    }

    /// d* = (−1)^k ⋆ d ⋆ on k-forms, the L² adjoint of d.
    pub fn codifferential(&self, a: &FormField<T>) -> FormField<T> {
        let k = a.degree();
        assert!(k >= 1, "codifferential of a function");
        let s = self.hodge_star(&self.hodge_star(a).exterior_derivative());
        if k % 2 == 1 {
            s.scaled(-T::one())
        } else {
            s
        }
    }

    /// Pointwise form inner product ⟨a,b⟩_g.
    pub fn pointwise_inner(&self, a: &FormField<T>, b: &FormField<T>) -> Field<T> {
        assert_eq!(a.degree(), b.degree());
        let k = a.degree();
        Field::from_fn(&self.grid, 1, |p, out| {
            let m = &self.points[p];
            out[0] = a.at(p).inner(&b.at(p), &m.minors_for_degree(k));
        })
    }

    /// Σ ⟨a,b⟩_g √det g · cell volume.
    pub fn l2_inner(&self, a: &FormField<T>, b: &FormField<T>) -> T {
        let f = self.pointwise_inner(a, b);
        let mut s = T::zero();
        for (p, m) in self.points.iter().enumerate() {
            s += f.at(p)[0] * m.vol_coeff;
        }
        s * self.grid.cell_volume()
    }
}

/// φ together with its metric and dual 4-form ψ = ⋆φ on every point.
#[derive(Clone, Debug)]
pub struct StructureField<T> {
    pub phi: FormField<T>,
    pub psi: FormField<T>,
    pub metric: MetricField<T>,
}

impl<T: Real> StructureField<T> {
    pub fn new(phi: FormField<T>) -> Result<Self, StructureError> {
        let metric = MetricField::from_phi(&phi)?;
        let psi = metric.hodge_star(&phi);
        Ok(StructureField { phi, psi, metric })
    }

    pub fn grid(&self) -> &Arc<GridSpec<T>> {
        self.phi.grid()
    }

    /// d*φ = −⋆dψ.
    pub fn codifferential_phi(&self) -> FormField<T> {
        self.metric
            .hodge_star(&self.psi.exterior_derivative())
            .scaled(-T::one())
    }

    /// Δφ = d d*φ, valid when φ is closed.
    pub fn hodge_laplacian_closed(&self) -> FormField<T> {
        self.codifferential_phi().exterior_derivative()
    }

    pub fn hitchin_volume(&self) -> T {
        self.metric.volume()
    }
}

/// Δφ = d d*φ for closed φ; the second return value is ‖dφ‖∞, reported so
/// callers can warn when the closedness premise is violated.
pub fn hodge_laplacian_closed<T: Real>(
    phi: &FormField<T>,
    m: &MetricField<T>,
) -> (FormField<T>, T) {
    let closedness = phi.exterior_derivative().max_abs();
    let psi = m.hodge_star(phi);
    let sigma = m.hodge_star(&psi.exterior_derivative()).scaled(-T::one());
    (sigma.exterior_derivative(), closedness)
}

/// Pointwise form built from a closure over positions; convenience for tests
/// and initial data.
pub fn form_field_from<T: Real, F>(grid: &Arc<GridSpec<T>>, degree: usize, f: F) -> FormField<T>
where
    F: Fn([T; 7]) -> FormK<T> + Sync,
{
    FormField::from_fn(grid, degree, |p| f(grid.coords(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::g2::standard_phi;
    use crate::linalg;

    fn grid2(n: usize) -> Arc<GridSpec<f64>> {
        GridSpec::with_active(&[0, 1], n).unwrap()
    }

    fn wavy(degree: usize, grid: &Arc<GridSpec<f64>>, shift: f64) -> FormField<f64> {
        form_field_from(grid, degree, |x| {
            let mut f = FormK::zero(degree);
            for (i, c) in f.components_mut().iter_mut().enumerate() {
                let i = i as f64;
                *c = (x[0] + 0.3 * i + shift).sin() * (2.0 * x[1] - 0.7 * i).cos() + 0.1 * i;
            }
            f
        })
    }

    fn bumpy_metric(grid: &Arc<GridSpec<f64>>) -> MetricField<f64> {
        MetricField::from_fn(grid, |p| {
            let x = grid.coords(p);
            let mut g = linalg::identity();
            for i in 0..7 {
                g[i][i] = 1.0 + 0.2 * (x[0] + i as f64).sin() * x[1].cos();
                if i + 1 < 7 {
                    let v = 0.1 * (x[1] + x[0] * 2.0).sin();
                    g[i][i + 1] = v;
                    g[i + 1][i] = v;
                }
            }
            g
        })
        .unwrap()
    }

    #[test]
    fn flat_christoffel_vanishes() {
        let g = grid2(8);
        let s = StructureField::new(FormField::constant(&g, &standard_phi())).unwrap();
        assert_eq!(s.metric.christoffel().max_abs(), 0.0);
        assert_eq!(s.hodge_laplacian_closed().max_abs(), 0.0);
    }

    #[test]
    fn christoffel_symmetric_in_lower_indices() {
        let g = grid2(16);
        let m = bumpy_metric(&g);
        let gam = m.christoffel();
        for p in (0..g.npoints()).step_by(17) {
            let a = gam.at(p);
            for k in 0..7 {
                for i in 0..7 {
                    for j in 0..7 {
                        assert_eq!(a[gamma_index(k, i, j)], a[gamma_index(k, j, i)]);
                    }
                }
            }
        }
    }

    #[test]
    fn conformal_christoffel_matches_closed_form() {
        // g = e^{2u} δ with u = 0.3 sin x¹: Γ^k_ij = δ_ki u_j + δ_kj u_i − δ_ij u_k
        let err = |n: usize| {
            let g = grid2(n);
            let m = MetricField::from_fn(&g, |p| {
                let u = 0.3 * g.coords(p)[0].sin();
                linalg::scale(&linalg::identity(), (2.0 * u).exp())
            })
            .unwrap();
            let gam = m.christoffel();
            let mut e: f64 = 0.0;
            for p in 0..g.npoints() {
                let du = [0.3 * g.coords(p)[0].cos(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
                for k in 0..7 {
                    for i in 0..7 {
                        for j in 0..7 {
                            let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                            let exact = d(k, i) * du[j] + d(k, j) * du[i] - d(i, j) * du[k];
                            e = e.max((gam.at(p)[gamma_index(k, i, j)] - exact).abs());
                        }
                    }
                }
            }
            e
        };
        let order = (err(16) / err(32)).log2();
        assert!(order > 3.7, "order {order}");
    }

    #[test]
    fn star_star_is_identity_on_fields() {
        let g = grid2(8);
        let m = bumpy_metric(&g);
        for k in 0..8 {
            let a = wavy(k, &g, 0.4);
            let back = m.hodge_star(&m.hodge_star(&a));
            assert!(back.max_abs_diff(&a) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn codifferential_is_adjoint_of_d() {
        let g = grid2(32);
        let m = bumpy_metric(&g);
        for k in 1..7 {
            let alpha = wavy(k - 1, &g, 0.1);
            let beta = wavy(k, &g, 1.3);
            let lhs = m.l2_inner(&alpha.exterior_derivative(), &beta);
            let rhs = m.l2_inner(&alpha, &m.codifferential(&beta));
            let na = m.l2_inner(&alpha, &alpha).sqrt();
            let nb = m.l2_inner(&beta, &beta).sqrt();
            let r = (lhs - rhs).abs() / (na * nb);
            assert!(r < 1e-12, "k={k}: {r}");
        }
    }

    #[test]
    fn codifferential_of_constant_vanishes() {
        let g = grid2(8);
        let m = MetricField::from_fn(&g, |_| linalg::identity()).unwrap();
        let a = FormField::constant(&g, &standard_phi());
        assert_eq!(m.codifferential(&a).max_abs(), 0.0);
    }
}

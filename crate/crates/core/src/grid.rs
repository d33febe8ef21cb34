//! Periodic grids over the 7-torus, sampled fields, and the fourth-order
//! central difference operator.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::exterior::{basis, FormK, DIM};
use crate::scalar::{from_usize, lit, Real};

/// Minimum points along an axis that carries variation (stencil half-width 2).
pub const MIN_ACTIVE_POINTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis {axis}: {n} points; an active axis needs at least {MIN_ACTIVE_POINTS}")]
    TooFewPoints { axis: usize, n: usize },
    #[error("axis {axis}: shape must be positive")]
    EmptyAxis { axis: usize },
    #[error("axis {axis}: period must be positive and finite")]
    BadPeriod { axis: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug)]
pub struct GridSpec<T> {
    shape: [usize; 7],
    periods: [T; 7],
    spacing: [T; 7],
    strides: [usize; 7],
    npoints: usize,
    active: Vec<usize>,
    /// Per axis, for each point: (x−2h, x−h, x+h, x+2h) neighbours.
    neighbors: [Vec<[u32; 4]>; 7],
    inv_12h: [T; 7],
}

impl<T: Real> GridSpec<T> {
    /// Axes with more than one point are active and must have at least
    /// five points.
    pub fn new(shape: [usize; 7], periods: [T; 7]) -> Result<Arc<Self>, GridError> {
        for axis in 0..7 {
            if shape[axis] == 0 {
                return Err(GridError::EmptyAxis { axis });
            }
            if !(periods[axis] > T::zero()) || !periods[axis].is_finite() {
                return Err(GridError::BadPeriod { axis });
            }
            if shape[axis] > 1 && shape[axis] < MIN_ACTIVE_POINTS {
                return Err(GridError::TooFewPoints {
                    axis,
                    n: shape[axis],
                });
            }
        }
        let mut strides = [1usize; 7];
        for a in (0..6).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        let npoints = strides[0] * shape[0];
        let mut spacing = [T::zero(); 7];
        let mut inv_12h = [T::zero(); 7];
        for a in 0..7 {
            spacing[a] = periods[a] / from_usize(shape[a]);
            inv_12h[a] = T::one() / (lit::<T>(12.0) * spacing[a]);
        }
        let active: Vec<usize> = (0..7).filter(|&a| shape[a] > 1).collect();
        let mut neighbors: [Vec<[u32; 4]>; 7] = Default::default();
        for &a in &active {
            let n = shape[a];
            let s = strides[a];
            neighbors[a] = (0..npoints)
                .map(|p| {
                    let i = (p / s) % n;
                    let base = p - i * s;
                    let at = |d: isize| {
                        (base + ((i as isize + d).rem_euclid(n as isize) as usize) * s) as u32
                    };
                    [at(-2), at(-1), at(1), at(2)]
                })
                .collect();
        }
        Ok(Arc::new(GridSpec {
            shape,
            periods,
            spacing,
            strides,
            npoints,
            active,
            neighbors,
            inv_12h,
        }))
    }

    /// `n` points along each listed axis, a single point elsewhere, periods 2π.
    pub fn with_active(active: &[usize], n: usize) -> Result<Arc<Self>, GridError> {
        let mut shape = [1usize; 7];
        for &a in active {
            shape[a] = n;
        }
        Self::new(shape, [lit(std::f64::consts::TAU); 7])
    }

    pub fn shape(&self) -> [usize; 7] {
        self.shape
    }

    pub fn periods(&self) -> [T; 7] {
        self.periods
    }

    pub fn spacing(&self) -> [T; 7] {
        self.spacing
    }

    pub fn active_axes(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, axis: usize) -> bool {
        self.shape[axis] > 1
    }

    pub fn npoints(&self) -> usize {
        self.npoints
    }

    /// Smallest spacing over active axes (the largest period if none).
    pub fn h_min(&self) -> T {
        let mut h = T::infinity();
        for &a in &self.active {
            h = h.min(self.spacing[a]);
        }
        if h.is_infinite() {
            self.periods.iter().fold(T::zero(), |m, &p| m.max(p))
        } else {
            h
        }
    }

    /// Largest spacing over active axes (zero if none).
    pub fn h_max(&self) -> T {
        self.active
            .iter()
            .fold(T::zero(), |m, &a| m.max(self.spacing[a]))
    }

    /// Coordinate volume of one cell; inactive axes contribute their period.
    pub fn cell_volume(&self) -> T {
        self.spacing.iter().fold(T::one(), |v, &h| v * h)
    }

    pub fn multi_index(&self, p: usize) -> [usize; 7] {
        let mut idx = [0usize; 7];
        for a in 0..7 {
            idx[a] = (p / self.strides[a]) % self.shape[a];
        }
        idx
    }

    pub fn coords(&self, p: usize) -> [T; 7] {
        let idx = self.multi_index(p);
        let mut x = [T::zero(); 7];
        for a in 0..7 {
            x[a] = from_usize::<T>(idx[a]) * self.spacing[a];
        }
        x
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn neighbors(&self, axis: usize, p: usize) -> [u32; 4] {
        self.neighbors[axis][p]
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.shape == other.shape && self.periods == other.periods
    }

    /// Fourth-order central difference along `axis` of component `c` of an
    /// interleaved array with `nc` components per point. Zero on inactive axes.
    #[inline(always)]
    pub fn diff(&self, data: &[T], nc: usize, p: usize, axis: usize, c: usize) -> T {
        if self.shape[axis] == 1 {
            return T::zero();
        }
        let [m2, m1, p1, p2] = self.neighbors[axis][p];
        let f = |q: u32| data[q as usize * nc + c];
        (lit::<T>(8.0) * (f(p1) - f(m1)) - (f(p2) - f(m2))) * self.inv_12h[axis]
    }

    /// Derivatives of every component along `axis` at point `p`.
    #[inline]
    pub fn diff_all(&self, data: &[T], nc: usize, p: usize, axis: usize, out: &mut [T]) {
        if self.shape[axis] == 1 {
            out[..nc].iter_mut().for_each(|x| *x = T::zero());
            return;
        }
        let [m2, m1, p1, p2] = self.neighbors[axis][p];
        let (m2, m1, p1, p2) = (
            m2 as usize * nc,
            m1 as usize * nc,
            p1 as usize * nc,
            p2 as usize * nc,
        );
        let k = self.inv_12h[axis];
        let eight = lit::<T>(8.0);
        for c in 0..nc {
            out[c] = (eight * (data[p1 + c] - data[m1 + c]) - (data[p2 + c] - data[m2 + c])) * k;
        }
    }
}

/// Values with `ncomp` components at every grid point, point-major.
#[derive(Clone, Debug)]
pub struct Field<T> {
    grid: Arc<GridSpec<T>>,
    ncomp: usize,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(grid: &Arc<GridSpec<T>>, ncomp: usize) -> Self {
        Field {
            grid: grid.clone(),
            ncomp,
            data: vec![T::zero(); grid.npoints() * ncomp],
        }
    }

    pub fn from_vec(
        grid: &Arc<GridSpec<T>>,
        ncomp: usize,
        data: Vec<T>,
    ) -> Result<Self, GridError> {
        let expected = grid.npoints() * ncomp;
        if data.len() != expected {
            return Err(GridError::Length {
                expected,
                got: data.len(),
            });
        }
        Ok(Field {
            grid: grid.clone(),
            ncomp,
            data,
        })
    }

    /// Fills each point independently (in parallel).
    pub fn from_fn<F>(grid: &Arc<GridSpec<T>>, ncomp: usize, f: F) -> Self
    where
        F: Fn(usize, &mut [T]) + Sync,
    {
        let mut out = Self::zeros(grid, ncomp);
        if ncomp > 0 {
            out.data
                .par_chunks_mut(ncomp)
                .enumerate()
                .for_each(|(p, s)| f(p, s));
        }
        out
    }

    /// Pointwise map into a new field with `ncomp` components.
    pub fn map<F>(&self, ncomp: usize, f: F) -> Self
    where
        F: Fn(usize, &[T], &mut [T]) + Sync,
    {
        let nc = self.ncomp;
        Self::from_fn(&self.grid, ncomp, |p, out| {
            f(p, &self.data[p * nc..(p + 1) * nc], out)
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec<T>> {
        &self.grid
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, p: usize) -> &[T] {
        &self.data[p * self.ncomp..(p + 1) * self.ncomp]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize) -> &mut [T] {
        let nc = self.ncomp;
        &mut self.data[p * nc..(p + 1) * nc]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |m, &x| m.max(x))
    }

    pub fn min(&self) -> T {
        self.data.iter().fold(T::infinity(), |m, &x| m.min(x))
    }

    /// Sequential sum in point order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &x| s + x)
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(self.ncomp, |_, a, out| {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x * s;
            }
        })
    }

    /// self + s·other
    pub fn plus_scaled(&self, s: T, other: &Self) -> Self {
        assert!(self.grid.same_as(&other.grid) && self.ncomp == other.ncomp);
        let od = &other.data;
        let nc = self.ncomp;
        self.map(nc, |p, a, out| {
            for c in 0..nc {
                out[c] = a[c] + s * od[p * nc + c];
            }
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Derivative of every component along `axis`.
    pub fn partial(&self, axis: usize) -> Self {
        let nc = self.ncomp;
        let g = self.grid.clone();
        Self::from_fn(&self.grid, nc, |p, out| {
            g.diff_all(&self.data, nc, p, axis, out)
        })
    }

    /// Component `c` as a scalar field.
    pub fn component(&self, c: usize) -> Self {
        self.map(1, |_, a, out| out[0] = a[c])
    }
}

/// A k-form field in canonical component layout.
#[derive(Clone, Debug)]
pub struct FormField<T> {
    degree: usize,
    field: Field<T>,
}

impl<T: Real> FormField<T> {
    pub fn zeros(grid: &Arc<GridSpec<T>>, degree: usize) -> Self {
        FormField {
            degree,
            field: Field::zeros(grid, DIM[degree]),
        }
    }

    pub fn from_field(degree: usize, field: Field<T>) -> Result<Self, GridError> {
        if field.ncomp() != DIM[degree] {
            return Err(GridError::Length {
                expected: DIM[degree],
                got: field.ncomp(),
            });
        }
        Ok(FormField { degree, field })
    }

    pub fn constant(grid: &Arc<GridSpec<T>>, form: &FormK<T>) -> Self {
        let c = form.components().to_vec();
        FormField {
            degree: form.degree(),
            field: Field::from_fn(grid, c.len(), |_, out| out.copy_from_slice(&c)),
        }
    }

    pub fn from_fn<F>(grid: &Arc<GridSpec<T>>, degree: usize, f: F) -> Self
    where
        F: Fn(usize) -> FormK<T> + Sync,
    {
        FormField {
            degree,
            field: Field::from_fn(grid, DIM[degree], |p, out| {
                let a = f(p);
                debug_assert_eq!(a.degree(), degree);
                out.copy_from_slice(a.components());
            }),
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn grid(&self) -> &Arc<GridSpec<T>> {
        self.field.grid()
    }

    pub fn field(&self) -> &Field<T> {
        &self.field
    }

    pub fn into_field(self) -> Field<T> {
        self.field
    }

    pub fn at(&self, p: usize) -> FormK<T> {
        FormK::from_components(self.degree, self.field.at(p)).expect("layout invariant")
    }

    pub fn max_abs(&self) -> T {
        self.field.max_abs()
    }

    pub fn plus_scaled(&self, s: T, other: &Self) -> Self {
        assert_eq!(self.degree, other.degree);
        FormField {
            degree: self.degree,
            field: self.field.plus_scaled(s, &other.field),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        FormField {
            degree: self.degree,
            field: self.field.scaled(s),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.field.max_abs_diff(&other.field)
    }

    /// Pointwise map to forms of degree `degree`.
    pub fn map<F>(&self, degree: usize, f: F) -> Self
    where
        F: Fn(usize, &FormK<T>) -> FormK<T> + Sync,
    {
        let g = self.grid().clone();
        FormField::from_fn(&g, degree, |p| f(p, &self.at(p)))
    }

    /// Discrete exterior derivative; d∘d vanishes to rounding because the
    /// difference operators along distinct axes commute.
    pub fn exterior_derivative(&self) -> Self {
        let k = self.degree;
        assert!(k < 7, "d of a 7-form");
        let b = basis();
        let g = self.grid().clone();
        let nc = DIM[k];
        let data = self.field.data();
        let table = b.wedge_table(1, k);
        let active: Vec<usize> = g.active_axes().to_vec();
        let field = Field::from_fn(&g, DIM[k + 1], |p, out| {
            out.iter_mut().for_each(|x| *x = T::zero());
            let mut dcomp = [T::zero(); 35];
            for &axis in &active {
                g.diff_all(data, nc, p, axis, &mut dcomp);
                for &(ia, ib, iab, odd) in table {
                    if ia as usize == axis {
                        let v = dcomp[ib as usize];
                        out[iab as usize] += if odd { -v } else { v };
                    }
                }
            }
        });
        FormField {
            degree: k + 1,
            field,
        }
    }

    /// Sum over the grid of (integrand at each point) × cell volume.
    pub fn integrate_top(&self) -> T {
        assert_eq!(self.degree, 7);
        self.field.sum() * self.grid().cell_volume()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(n: usize) -> Arc<GridSpec<f64>> {
        GridSpec::with_active(&[0, 1], n).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(matches!(
            GridSpec::<f64>::with_active(&[0], 4),
            Err(GridError::TooFewPoints { axis: 0, n: 4 })
        ));
        let mut periods = [1.0; 7];
        periods[3] = 0.0;
        assert!(matches!(
            GridSpec::<f64>::new([1; 7], periods),
            Err(GridError::BadPeriod { axis: 3 })
        ));
    }

    #[test]
    fn inactive_derivatives_are_zero() {
        let g = grid2(8);
        let f = Field::from_fn(&g, 1, |p, o| o[0] = g.coords(p)[0].sin() + 3.0);
        assert_eq!(f.partial(4).max_abs(), 0.0);
    }

    #[test]
    fn sine_derivative_is_fourth_order() {
        let err = |n: usize| {
            let g = grid2(n);
            let f = Field::from_fn(&g, 1, |p, o| o[0] = (2.0 * g.coords(p)[1]).sin());
            let d = f.partial(1);
            (0..g.npoints())
                .map(|p| (d.at(p)[0] - 2.0 * (2.0 * g.coords(p)[1]).cos()).abs())
                .fold(0.0, f64::max)
        };
        let order = (err(16) / err(32)).log2();
        assert!(order > 3.8, "order {order}");
    }

    #[test]
    fn d_of_constant_vanishes() {
        let g = grid2(8);
        let a = FormField::constant(&g, &crate::g2::standard_phi());
        assert_eq!(a.exterior_derivative().max_abs(), 0.0);
    }

    #[test]
    fn d_of_sine_e2() {
        let g = grid2(32);
        let a = FormField::from_fn(&g, 1, |p| {
            FormK::from_terms(1, &[(g.coords(p)[0].sin(), &[1])])
        });
        let da = a.exterior_derivative();
        let mut err: f64 = 0.0;
        for p in 0..g.npoints() {
            let exact = g.coords(p)[0].cos();
            err = err.max((da.at(p).get(&[0, 1]) - exact).abs());
            assert_eq!(da.at(p).get(&[0, 2]), 0.0);
        }
        assert!(err < 5e-5, "{err}");
    }

    #[test]
    fn d_squared_vanishes() {
        let g = GridSpec::<f64>::with_active(&[0, 1, 3], 6).unwrap();
        for k in 0..6 {
            let a = FormField::from_fn(&g, k, |p| {
                let x = g.coords(p);
                let mut f = FormK::<f64>::zero(k);
                for (i, c) in f.components_mut().iter_mut().enumerate() {
                    *c = ((i + 1) as f64 * x[0] + x[1] * (i % 3) as f64).sin() * (x[3] * 2.0).cos();
                }
                f
            });
            let dd = a.exterior_derivative().exterior_derivative();
            assert!(dd.max_abs() < 1e-12, "k={k}: {}", dd.max_abs());
        }
    }
}

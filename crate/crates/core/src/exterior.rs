//! Exterior algebra of R⁷: canonical component storage, wedge, interior
//! product, minors of 7×7 matrices and the Hodge star built from them.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::OnceLock;

use thiserror::Error;

use crate::linalg::Mat7;
use crate::scalar::Real;

/// Number of independent components of a k-form on R⁷.
pub const DIM: [usize; 8] = [1, 7, 21, 35, 35, 21, 7, 1];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormError {
    #[error("wedge of degrees {0} and {1} exceeds 7")]
    DegreeOverflow(usize, usize),
    #[error("interior product of a 0-form")]
    InteriorOfScalar,
    #[error("form degree {0} out of range")]
    BadDegree(usize),
    #[error("expected {expected} components, got {got}")]
    Length { expected: usize, got: usize },
}

/// Index bookkeeping shared by every form operation.
pub struct Basis {
    masks: [Vec<u8>; 8],
    pos: [u8; 128],
    wedge: Vec<Vec<(u8, u8, u8, bool)>>,
    interior: [Vec<(u8, u8, u8, bool)>; 8],
    complement: [Vec<(u8, bool)>; 8],
    /// Per degree-k mask: k pairs (index j, position of mask without j).
    laplace: [Vec<(u8, u8)>; 8],
}

/// Parity of the shuffle that merges `a` then `b` into increasing order.
fn merge_odd(a: u8, b: u8) -> bool {
    let mut inversions = 0u32;
    for j in 0..7 {
        if b & (1 << j) != 0 {
            inversions += (a >> (j + 1)).count_ones();
        }
    }
    inversions % 2 == 1
}

impl Basis {
    fn build() -> Self {
        let mut masks: [Vec<u8>; 8] = Default::default();
        let mut all: Vec<u8> = (0u8..128).collect();
        // lexicographic order on increasing index tuples
        all.sort_by_key(|&m| {
            let mut key = [9u8; 7];
            let mut n = 0;
            for i in 0..7 {
                if m & (1 << i) != 0 {
                    key[n] = i;
                    n += 1;
                }
            }
            key
        });
        let mut pos = [0u8; 128];
        for m in all {
            let k = m.count_ones() as usize;
            pos[m as usize] = masks[k].len() as u8;
            masks[k].push(m);
        }
        let mut wedge = vec![Vec::new(); 64];
        for p in 0..8 {
            for q in 0..8 - p {
                let table = &mut wedge[p * 8 + q];
                for (ia, &a) in masks[p].iter().enumerate() {
                    for (ib, &b) in masks[q].iter().enumerate() {
                        if a & b == 0 {
                            table.push((
                                ia as u8,
                                ib as u8,
                                pos[(a | b) as usize],
                                merge_odd(a, b),
                            ));
                        }
                    }
                }
            }
        }
        let mut interior: [Vec<(u8, u8, u8, bool)>; 8] = Default::default();
        let mut complement: [Vec<(u8, bool)>; 8] = Default::default();
        for k in 0..8 {
            for (ia, &a) in masks[k].iter().enumerate() {
                for m in 0..7u8 {
                    if a & (1 << m) != 0 {
                        let below = (a & ((1u8 << m) - 1)).count_ones();
                        let rest = a & !(1 << m);
                        interior[k].push((ia as u8, m, pos[rest as usize], below % 2 == 1));
                    }
                }
                let c = 0x7f & !a;
                complement[k].push((pos[c as usize], merge_odd(a, c)));
            }
        }
        let mut laplace: [Vec<(u8, u8)>; 8] = Default::default();
        for k in 1..8 {
            for &a in &masks[k] {
                for j in 0..7u8 {
                    if a & (1 << j) != 0 {
                        laplace[k].push((j, pos[(a & !(1 << j)) as usize]));
                    }
                }
            }
        }
        Basis {
            masks,
            pos,
            wedge,
            interior,
            complement,
            laplace,
        }
    }

    /// Bitmasks of the degree-k basis in canonical order.
    pub fn masks(&self, k: usize) -> &[u8] {
        &self.masks[k]
    }

    /// Canonical position of a bitmask within its degree.
    pub fn position(&self, mask: u8) -> usize {
        self.pos[mask as usize] as usize
    }

    /// Zero-based increasing indices of the basis element at `pos`.
    pub fn indices(&self, k: usize, pos: usize) -> Vec<usize> {
        let m = self.masks[k][pos];
        (0..7).filter(|i| m & (1 << i) != 0).collect()
    }

    /// (pos_a, pos_b, pos_ab, odd) for every non-vanishing product.
    pub fn wedge_table(&self, p: usize, q: usize) -> &[(u8, u8, u8, bool)] {
        &self.wedge[p * 8 + q]
    }

    /// (source pos, contracted index, target pos, odd) for degree k.
    pub fn interior_table(&self, k: usize) -> &[(u8, u8, u8, bool)] {
        &self.interior[k]
    }

    /// (complement pos, odd) for each degree-k basis element.
    pub fn complement_table(&self, k: usize) -> &[(u8, bool)] {
        &self.complement[k]
    }
}

pub fn basis() -> &'static Basis {
    static B: OnceLock<Basis> = OnceLock::new();
    B.get_or_init(Basis::build)
}

/// Sign of the permutation sorting `idx`, with the sorted bitmask; `None`
/// when an index repeats.
pub fn sort_sign(idx: &[usize]) -> Option<(u8, bool)> {
    let mut mask = 0u8;
    let mut odd = false;
    for (a, &i) in idx.iter().enumerate() {
        assert!(i < 7, "index {i} out of range");
        if mask & (1 << i) != 0 {
            return None;
        }
        mask |= 1 << i;
        for &j in &idx[a + 1..] {
            if j < i {
                odd = !odd;
            }
        }
    }
    Some((mask, odd))
}

/// A k-form at a point, stored on strictly increasing multi-indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FormK<T> {
    degree: usize,
    c: [T; 35],
}

impl<T: Real> FormK<T> {
    pub fn zero(degree: usize) -> Self {
        assert!(degree <= 7, "form degree {degree} out of range");
        FormK {
            degree,
            c: [T::zero(); 35],
        }
    }

    pub fn from_components(degree: usize, comps: &[T]) -> Result<Self, FormError> {
        if degree > 7 {
            return Err(FormError::BadDegree(degree));
        }
        if comps.len() != DIM[degree] {
            return Err(FormError::Length {
                expected: DIM[degree],
                got: comps.len(),
            });
        }
        let mut f = Self::zero(degree);
        f.c[..comps.len()].copy_from_slice(comps);
        Ok(f)
    }

    /// Sum of `coef · e^{indices}` terms; indices are zero-based and may be
    /// given in any order.
    pub fn from_terms(degree: usize, terms: &[(T, &[usize])]) -> Self {
        let mut f = Self::zero(degree);
        for (coef, idx) in terms {
            assert_eq!(idx.len(), degree);
            f.add_component(idx, *coef);
        }
        f
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn components(&self) -> &[T] {
        &self.c[..DIM[self.degree]]
    }

    pub fn components_mut(&mut self) -> &mut [T] {
        let n = DIM[self.degree];
        &mut self.c[..n]
    }

    /// Signed component for an arbitrary (zero-based) index tuple.
    pub fn get(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.degree);
        match sort_sign(idx) {
            None => T::zero(),
            Some((mask, odd)) => {
                let v = self.c[basis().position(mask)];
                if odd {
                    -v
                } else {
                    v
                }
            }
        }
    }

    /// Adds `v` to the component with the given (unordered) indices.
    pub fn add_component(&mut self, idx: &[usize], v: T) {
        if let Some((mask, odd)) = sort_sign(idx) {
            let p = basis().position(mask);
            self.c[p] += if odd { -v } else { v };
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = *self;
        out.components_mut().iter_mut().for_each(|x| *x *= s);
        out
    }

    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.degree, other.degree);
        for (a, b) in self.components_mut().iter_mut().zip(other.components()) {
            *a += s * *b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.components()
            .iter()
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Euclidean sum of squares of the stored components.
    pub fn coeff_norm_sq(&self) -> T {
        self.components().iter().map(|&x| x * x).sum()
    }

    pub fn wedge(&self, other: &Self) -> Result<Self, FormError> {
        let (p, q) = (self.degree, other.degree);
        if p + q > 7 {
            return Err(FormError::DegreeOverflow(p, q));
        }
        let mut out = Self::zero(p + q);
        for &(a, b, ab, odd) in basis().wedge_table(p, q) {
            let v = self.c[a as usize] * other.c[b as usize];
            if odd {
                out.c[ab as usize] -= v;
            } else {
                out.c[ab as usize] += v;
            }
        }
        Ok(out)
    }

    /// Interior product v⌟a, contracting the first slot.
    pub fn interior(&self, v: &[T; 7]) -> Result<Self, FormError> {
        if self.degree == 0 {
            return Err(FormError::InteriorOfScalar);
        }
        let mut out = Self::zero(self.degree - 1);
        for &(src, m, dst, odd) in basis().interior_table(self.degree) {
            let x = v[m as usize] * self.c[src as usize];
            if odd {
                out.c[dst as usize] -= x;
            } else {
                out.c[dst as usize] += x;
            }
        }
        Ok(out)
    }

    /// Interior product with the coordinate vector e_m.
    pub fn interior_basis(&self, m: usize) -> Self {
        let mut v = [T::zero(); 7];
        v[m] = T::one();
        self.interior(&v).expect("interior of positive-degree form")
    }

    /// Components with every index raised by the matrix whose minors are given.
    pub fn raised(&self, minors: &Minors<T>) -> Self {
        let k = self.degree;
        let n = DIM[k];
        let table = minors.table(k);
        let mut out = Self::zero(k);
        for i in 0..n {
            let row = &table[i * n..(i + 1) * n];
            out.c[i] = row
                .iter()
                .zip(self.components())
                .map(|(&m, &a)| m * a)
                .sum();
        }
        out
    }

    /// Form inner product (full contraction divided by k!) against the
    /// inverse metric whose minors are given.
    pub fn inner(&self, other: &Self, inv_minors: &Minors<T>) -> T {
        assert_eq!(self.degree, other.degree);
        let r = other.raised(inv_minors);
        self.components()
            .iter()
            .zip(r.components())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Hodge star given minors of g⁻¹ and the signed volume coefficient.
    pub fn star(&self, inv_minors: &Minors<T>, signed_vol: T) -> Self {
        let k = self.degree;
        let r = self.raised(inv_minors);
        let mut out = Self::zero(7 - k);
        for (i, &(cpos, odd)) in basis().complement_table(k).iter().enumerate() {
            let v = signed_vol * r.c[i];
            out.c[cpos as usize] = if odd { -v } else { v };
        }
        out
    }

    /// Pullback by the linear map u: (u*a)_I = a_J u^J_I.
    pub fn pullback(&self, u: &Mat7<T>) -> Self {
        let k = self.degree;
        let n = DIM[k];
        let m = Minors::new(u);
        let table = m.table(k);
        let mut out = Self::zero(k);
        for i in 0..n {
            let mut s = T::zero();
            for j in 0..n {
                s += table[j * n + i] * self.c[j];
            }
            out.c[i] = s;
        }
        out
    }

    /// Fully antisymmetric dense array with 7^k entries (row-major).
    pub fn to_dense(&self) -> Vec<T> {
        let k = self.degree;
        let mut out = vec![T::zero(); 7usize.pow(k as u32)];
        if k == 0 {
            out[0] = self.c[0];
            return out;
        }
        let mut idx = vec![0usize; k];
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut r = flat;
            for a in (0..k).rev() {
                idx[a] = r % 7;
                r /= 7;
            }
            *slot = self.get(&idx);
        }
        out
    }

    /// Reads the increasing-index entries of a dense antisymmetric array.
    pub fn from_dense(k: usize, dense: &[T]) -> Self {
        assert_eq!(dense.len(), 7usize.pow(k as u32));
        let b = basis();
        let mut out = Self::zero(k);
        for p in 0..DIM[k] {
            let flat = b.indices(k, p).iter().fold(0usize, |f, &i| f * 7 + i);
            out.c[p] = dense[flat];
        }
        out
    }
}

impl<T: Real> Add for FormK<T> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.axpy(T::one(), &rhs);
        self
    }
}

impl<T: Real> Sub for FormK<T> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.axpy(-T::one(), &rhs);
        self
    }
}

impl<T: Real> Neg for FormK<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scaled(-T::one())
    }
}

impl<T: Real> Mul<T> for FormK<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scaled(s)
    }
}

/// Size-k minors of A⁻¹ from the size-(7−k) minors of A (Jacobi):
/// det A⁻¹[I,J] = ε(I)ε(J) det A[Jᶜ,Iᶜ] / det A.
fn complementary<T: Real>(direct: &Minors<T>, k: usize, inv_det: T) -> Vec<T> {
    let n = DIM[k];
    let src = direct.table(7 - k);
    let comp = basis().complement_table(k);
    let mut t = vec![T::zero(); n * n];
    for (i, &(ci, oi)) in comp.iter().enumerate() {
        for (j, &(cj, oj)) in comp.iter().enumerate() {
            let v = src[cj as usize * n + ci as usize] * inv_det;
            t[i * n + j] = if oi != oj { -v } else { v };
        }
    }
    t
}

/// k×k minors by expansion along the first row of each subset.
fn expand_row<T: Real>(m: &Mat7<T>, k: usize, prev: &[T]) -> Vec<T> {
    let b = basis();
    let (n, np) = (DIM[k], DIM[k - 1]);
    let lap = &b.laplace[k];
    let mut t = vec![T::zero(); n * n];
    for pi in 0..n {
        let (i0, rest) = lap[pi * k];
        let row = &m[i0 as usize];
        let sub = &prev[rest as usize * np..(rest as usize + 1) * np];
        let out = &mut t[pi * n..(pi + 1) * n];
        for (pj, o) in out.iter_mut().enumerate() {
            let mut s = T::zero();
            for (q, &(j, pos)) in lap[pj * k..(pj + 1) * k].iter().enumerate() {
                let v = row[j as usize] * sub[pos as usize];
                s = if q % 2 == 1 { s - v } else { s + v };
            }
            *o = s;
        }
    }
    t
}

/// All k×k minors of a 7×7 matrix, indexed by canonical row/column subsets.
#[derive(Clone, Debug)]
pub struct Minors<T> {
    tables: [Vec<T>; 8],
}

impl<T: Real> Minors<T> {
    pub fn new(m: &Mat7<T>) -> Self {
        Self::up_to(m, 7)
    }

    /// Minors of sizes 0..=kmax only; larger tables are left empty.
    pub fn up_to(m: &Mat7<T>, kmax: usize) -> Self {
        let mut tables: [Vec<T>; 8] = Default::default();
        tables[0] = vec![T::one()];
        tables[1] = (0..49).map(|f| m[f / 7][f % 7]).collect();
        for k in 2..=kmax.min(7) {
            tables[k] = expand_row(m, k, &tables[k - 1]);
        }
        Minors { tables }
    }

    /// Only the size-k minors of g⁻¹ (what raising a k-form needs); other
    /// tables are left empty.
    pub fn of_inverse_degree(g: &Mat7<T>, g_inv: &Mat7<T>, det_g: T, k: usize) -> Self {
        if k <= 3 {
            return Self::up_to(g_inv, k);
        }
        let direct = Self::up_to(g, 7 - k);
        let mut out = Minors {
            tables: Default::default(),
        };
        out.tables[k] = complementary(&direct, k, T::one() / det_g);
        out
    }

    /// Minors of g⁻¹ up to size kmax. Sizes above three come from the
    /// complementary minors of g (Jacobi), which is much cheaper than
    /// expanding the large tables directly.
    pub fn of_inverse(g: &Mat7<T>, g_inv: &Mat7<T>, det_g: T, kmax: usize) -> Self {
        let kmax = kmax.min(7);
        let mut out = Self::up_to(g_inv, kmax.min(3));
        if kmax <= 3 {
            return out;
        }
        let direct = Self::up_to(g, 7 - 4);
        for k in 4..=kmax {
            out.tables[k] = complementary(&direct, k, T::one() / det_g);
        }
        out
    }

    /// Row-major C(7,k)×C(7,k) table of k×k minors.
    pub fn table(&self, k: usize) -> &[T] {
        &self.tables[k]
    }

    pub fn determinant(&self) -> T {
        self.tables[7][0]
    }
}

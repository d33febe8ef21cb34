//! Dense covariant tensor fields: Levi-Civita derivatives, rough Laplacian,
//! metric norms and contractions. A rank-r field stores 7^r components per
//! point in row-major index order.

use crate::grid::Field;
use crate::linalg::{self, Mat7};
use crate::metric::MetricField;
use crate::scalar::Real;

pub fn pow7(r: usize) -> usize {
    7usize.pow(r as u32)
}

/// out[..i..] += s · Σ_k m[i][k] a[..k..] on one slot of a rank-`rank` array.
fn slot_apply<T: Real>(a: &[T], rank: usize, slot: usize, m: &Mat7<T>, s: T, out: &mut [T]) {
    let post = pow7(rank - slot - 1);
    let pre = a.len() / (7 * post);
    for pr in 0..pre {
        let base = pr * 7 * post;
        for i in 0..7 {
            for k in 0..7 {
                let c = m[i][k];
                if c == T::zero() {
                    continue;
                }
                let c = c * s;
                let (dst, src) = (base + i * post, base + k * post);
                for q in 0..post {
                    out[dst + q] += c * a[src + q];
                }
            }
        }
    }
}

/// Applies `m` to every slot: out = (m ⊗ … ⊗ m) a.
pub fn transform_all<T: Real>(a: &[T], rank: usize, m: &Mat7<T>) -> Vec<T> {
    let mut cur = a.to_vec();
    for slot in 0..rank {
        let mut next = vec![T::zero(); cur.len()];
        slot_apply(&cur, rank, slot, m, T::one(), &mut next);
        cur = next;
    }
    cur
}

/// Orthonormal-frame matrix F with g⁻¹ = FᵀF (F = L⁻¹ for g = LLᵀ).
pub fn frame<T: Real>(g: &Mat7<T>) -> Mat7<T> {
    linalg::lower_inverse(&linalg::cholesky(g).expect("positive-definite metric"))
}

/// |A|²_g = A_{i…}A^{i…} at one point.
pub fn norm_sq_at<T: Real>(a: &[T], rank: usize, g: &Mat7<T>) -> T {
    if rank == 0 {
        return a[0] * a[0];
    }
    transform_all(a, rank, &frame(g))
        .iter()
        .map(|&x| x * x)
        .sum()
}

/// ⟨A,B⟩_g at one point.
pub fn inner_at<T: Real>(a: &[T], b: &[T], rank: usize, g: &Mat7<T>) -> T {
    if rank == 0 {
        return a[0] * b[0];
    }
    let f = frame(g);
    let (x, y) = (transform_all(a, rank, &f), transform_all(b, rank, &f));
    x.iter().zip(&y).map(|(&u, &v)| u * v).sum()
}

/// ∇A at point p, derivative index first (7^{rank+1} entries).
pub fn covariant_at<T: Real>(
    a: &Field<T>,
    rank: usize,
    m: &MetricField<T>,
    p: usize,
    out: &mut [T],
) {
    let s = pow7(rank);
    let grid = a.grid();
    let data = a.data();
    for i in 0..7 {
        grid.diff_all(data, s, p, i, &mut out[i * s..(i + 1) * s]);
    }
    if rank == 0 {
        return;
    }
    let gam = m.christoffel().at(p);
    let local = &data[p * s..(p + 1) * s];
    for i in 0..7 {
        // G[j][k] = Γ^k_ij acting on each slot
        let mut gi = [[T::zero(); 7]; 7];
        let mut any = false;
        for j in 0..7 {
            for k in 0..7 {
                let v = gam[k * 49 + i * 7 + j];
                gi[j][k] = v;
                any |= v != T::zero();
            }
        }
        if !any {
            continue;
        }
        let o = &mut out[i * s..(i + 1) * s];
        for slot in 0..rank {
            slot_apply(local, rank, slot, &gi, -T::one(), o);
        }
    }
}

/// ∇A as a rank+1 field.
pub fn covariant_derivative<T: Real>(a: &Field<T>, rank: usize, m: &MetricField<T>) -> Field<T> {
    assert_eq!(a.ncomp(), pow7(rank));
    Field::from_fn(a.grid(), pow7(rank + 1), |p, out| {
        covariant_at(a, rank, m, p, out)
    })
}

/// Contracts the first two slots of a rank-(r+2) array with g^{ab}.
fn trace_first_two<T: Real>(a: &[T], gi: &Mat7<T>, out: &mut [T]) {
    let s = out.len();
    out.iter_mut().for_each(|x| *x = T::zero());
    for x in 0..7 {
        for y in 0..7 {
            let c = gi[x][y];
            if c == T::zero() {
                continue;
            }
            let src = &a[(x * 7 + y) * s..(x * 7 + y + 1) * s];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += c * v;
            }
        }
    }
}

/// Rough Laplacian ΔA = g^{ab}∇_a∇_b A.
pub fn rough_laplacian<T: Real>(a: &Field<T>, rank: usize, m: &MetricField<T>) -> Field<T> {
    let da = covariant_derivative(a, rank, m);
    laplacian_from_gradient(&da, rank, m)
}

/// ΔA given ∇A (rank+1 field).
pub fn laplacian_from_gradient<T: Real>(
    da: &Field<T>,
    rank: usize,
    m: &MetricField<T>,
) -> Field<T> {
    let s = pow7(rank);
    Field::from_fn(da.grid(), s, |p, out| {
        let mut buf = vec![T::zero(); 49 * s];
        covariant_at(da, rank + 1, m, p, &mut buf);
        trace_first_two(&buf, &m.at(p).g_inv, out);
    })
}

/// Hessian ∇∇A (rank+2 field), outer derivative index first.
pub fn second_covariant<T: Real>(a: &Field<T>, rank: usize, m: &MetricField<T>) -> Field<T> {
    covariant_derivative(&covariant_derivative(a, rank, m), rank + 1, m)
}

/// (div A)_J = g^{ab}∇_a A_{bJ}.
pub fn divergence<T: Real>(a: &Field<T>, rank: usize, m: &MetricField<T>) -> Field<T> {
    assert!(rank >= 1);
    let s = pow7(rank - 1);
    Field::from_fn(a.grid(), s, |p, out| {
        let mut buf = vec![T::zero(); 7 * pow7(rank)];
        covariant_at(a, rank, m, p, &mut buf);
        trace_first_two(&buf, &m.at(p).g_inv, out);
    })
}

/// Divergence given ∇A (derivative index first).
pub fn divergence_from_gradient<T: Real>(da: &Field<T>, m: &MetricField<T>) -> Field<T> {
    let s = da.ncomp() / 49;
    Field::from_fn(da.grid(), s, |p, out| {
        trace_first_two(da.at(p), &m.at(p).g_inv, out)
    })
}

/// Pointwise |A|².
pub fn norm_sq<T: Real>(a: &Field<T>, rank: usize, m: &MetricField<T>) -> Field<T> {
    a.map(1, |p, x, out| out[0] = norm_sq_at(x, rank, &m.at(p).g))
}

/// Pointwise ⟨A,B⟩.
pub fn inner<T: Real>(a: &Field<T>, b: &Field<T>, rank: usize, m: &MetricField<T>) -> Field<T> {
    a.map(1, |p, x, out| {
        out[0] = inner_at(x, b.at(p), rank, &m.at(p).g)
    })
}

/// g^{ij}A_ij.
pub fn trace<T: Real>(a: &Field<T>, m: &MetricField<T>) -> Field<T> {
    assert_eq!(a.ncomp(), 49);
    a.map(1, |p, x, out| {
        let gi = &m.at(p).g_inv;
        let mut s = T::zero();
        for i in 0..7 {
            for j in 0..7 {
                s += gi[i][j] * x[i * 7 + j];
            }
        }
        out[0] = s;
    })
}

/// Pointwise sqrt(|A|² + |∇A|²) and its grid maximum; ∇A is formed point
/// by point and never stored.
pub fn c1_norm<T: Real>(a: &Field<T>, rank: usize, m: &MetricField<T>) -> (Field<T>, T) {
    let f = Field::from_fn(a.grid(), 1, |p, out| {
        let mut buf = vec![T::zero(); pow7(rank + 1)];
        covariant_at(a, rank, m, p, &mut buf);
        let g = &m.at(p).g;
        out[0] = (norm_sq_at(a.at(p), rank, g) + norm_sq_at(&buf, rank + 1, g)).sqrt();
    });
    let mx = f.max();
    (f, mx)
}

/// A_ij as a matrix.
pub fn as_mat<T: Real>(a: &[T]) -> Mat7<T> {
    let mut m = [[T::zero(); 7]; 7];
    for i in 0..7 {
        m[i].copy_from_slice(&a[i * 7..i * 7 + 7]);
    }
    m
}

pub fn write_mat<T: Real>(m: &Mat7<T>, out: &mut [T]) {
    for i in 0..7 {
        out[i * 7..i * 7 + 7].copy_from_slice(&m[i]);
    }
}

/// Field of a single scalar per point from a closure.
pub fn scalar_field<T: Real, F>(like: &Field<T>, f: F) -> Field<T>
where
    F: Fn(usize) -> T + Sync,
{
    Field::from_fn(like.grid(), 1, |p, out| out[0] = f(p))
}

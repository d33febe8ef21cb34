//! Dense 7×7 linear algebra used at every grid point.

use crate::scalar::{lit, Real};

pub type Mat7<T> = [[T; 7]; 7];
pub type Vec7<T> = [T; 7];

pub fn zeros<T: Real>() -> Mat7<T> {
    [[T::zero(); 7]; 7]
}

pub fn identity<T: Real>() -> Mat7<T> {
    let mut m = zeros();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub fn transpose<T: Real>(a: &Mat7<T>) -> Mat7<T> {
    let mut t = zeros();
    for i in 0..7 {
        for j in 0..7 {
            t[j][i] = a[i][j];
        }
    }
    t
}

pub fn matmul<T: Real>(a: &Mat7<T>, b: &Mat7<T>) -> Mat7<T> {
    let mut c = zeros();
    for i in 0..7 {
        for k in 0..7 {
            let aik = a[i][k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..7 {
                c[i][j] += aik * b[k][j];
            }
        }
    }
    c
}

pub fn mat_vec<T: Real>(a: &Mat7<T>, v: &Vec7<T>) -> Vec7<T> {
    let mut out = [T::zero(); 7];
    for i in 0..7 {
        let mut s = T::zero();
        for j in 0..7 {
            s += a[i][j] * v[j];
        }
        out[i] = s;
    }
    out
}

pub fn scale<T: Real>(a: &Mat7<T>, s: T) -> Mat7<T> {
    let mut out = *a;
    for row in out.iter_mut() {
        for x in row.iter_mut() {
            *x *= s;
        }
    }
    out
}

pub fn add<T: Real>(a: &Mat7<T>, b: &Mat7<T>) -> Mat7<T> {
    let mut out = *a;
    for i in 0..7 {
        for j in 0..7 {
            out[i][j] += b[i][j];
        }
    }
    out
}

pub fn max_abs<T: Real>(a: &Mat7<T>) -> T {
    a.iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub fn max_abs_diff<T: Real>(a: &Mat7<T>, b: &Mat7<T>) -> T {
    let mut m = T::zero();
    for i in 0..7 {
        for j in 0..7 {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

/// Lower-triangular Cholesky factor, `None` unless `a` is positive-definite.
pub fn cholesky<T: Real>(a: &Mat7<T>) -> Option<Mat7<T>> {
    let mut l = zeros();
    for j in 0..7 {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in (j + 1)..7 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / djj;
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix.
pub fn lower_inverse<T: Real>(l: &Mat7<T>) -> Mat7<T> {
    let mut inv = zeros();
    for j in 0..7 {
        inv[j][j] = T::one() / l[j][j];
        for i in (j + 1)..7 {
            let mut s = T::zero();
            for k in j..i {
                s += l[i][k] * inv[k][j];
            }
            inv[i][j] = -s / l[i][i];
        }
    }
    inv
}

/// Inverse and determinant of a symmetric positive-definite matrix.
pub fn spd_inverse_det<T: Real>(a: &Mat7<T>) -> Option<(Mat7<T>, T)> {
    let l = cholesky(a)?;
    let li = lower_inverse(&l);
    let mut inv = zeros();
    for i in 0..7 {
        for j in 0..=i {
            let mut s = T::zero();
            for k in i..7 {
                s += li[k][i] * li[k][j];
            }
            inv[i][j] = s;
            inv[j][i] = s;
        }
    }
    let mut det = T::one();
    for i in 0..7 {
        det *= l[i][i] * l[i][i];
    }
    Some((inv, det))
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det<T: Real>(a: &Mat7<T>) -> T {
    let mut m = *a;
    let mut d = T::one();
    for c in 0..7 {
        let mut p = c;
        for r in (c + 1)..7 {
            if m[r][c].abs() > m[p][c].abs() {
                p = r;
            }
        }
        if m[p][c] == T::zero() {
            return T::zero();
        }
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        d *= m[c][c];
        for r in (c + 1)..7 {
            let f = m[r][c] / m[c][c];
            for k in c..7 {
                let v = m[c][k];
                m[r][k] -= f * v;
            }
        }
    }
    d
}

/// General inverse by Gauss–Jordan elimination; `None` when singular.
pub fn inverse<T: Real>(a: &Mat7<T>) -> Option<Mat7<T>> {
    let mut m = *a;
    let mut inv = identity();
    for c in 0..7 {
        let mut p = c;
        for r in (c + 1)..7 {
            if m[r][c].abs() > m[p][c].abs() {
                p = r;
            }
        }
        if m[p][c] == T::zero() {
            return None;
        }
        m.swap(p, c);
        inv.swap(p, c);
        let piv = T::one() / m[c][c];
        for k in 0..7 {
            m[c][k] *= piv;
            inv[c][k] *= piv;
        }
        for r in 0..7 {
            if r != c {
                let f = m[r][c];
                if f != T::zero() {
                    for k in 0..7 {
                        let (mv, iv) = (m[c][k], inv[c][k]);
                        m[r][k] -= f * mv;
                        inv[r][k] -= f * iv;
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn sym_eigenvalues<T: Real>(a: &Mat7<T>) -> Vec7<T> {
    let mut m = *a;
    for _sweep in 0..64 {
        let mut off = T::zero();
        for i in 0..7 {
            for j in (i + 1)..7 {
                off += m[i][j] * m[i][j];
            }
        }
        let scale = (0..7).fold(T::zero(), |s, i| s + m[i][i] * m[i][i]);
        if off <= T::eps() * T::eps() * scale || off == T::zero() {
            break;
        }
        for p in 0..7 {
            for q in (p + 1)..7 {
                if m[p][q] == T::zero() {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (lit::<T>(2.0) * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..7 {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..7 {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev = [T::zero(); 7];
    for i in 0..7 {
        ev[i] = m[i][i];
    }
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Eigenvalues of `b` relative to the positive-definite `a`, i.e. of `a⁻¹b`.
pub fn generalized_eigenvalues<T: Real>(a: &Mat7<T>, b: &Mat7<T>) -> Option<Vec7<T>> {
    let l = cholesky(a)?;
    let li = lower_inverse(&l);
    let c = matmul(&matmul(&li, b), &transpose(&li));
    Some(sym_eigenvalues(&c))
}

/// Matrix exponential by scaling and squaring of a Taylor series.
pub fn expm<T: Real>(a: &Mat7<T>) -> Mat7<T> {
    let norm = max_abs(a) * lit(7.0);
    let mut squarings = 0;
    let mut s = T::one();
    while norm * s > lit(0.5) {
        s *= lit(0.5);
        squarings += 1;
    }
    let x = scale(a, s);
    let mut term = identity();
    let mut sum = identity();
    for k in 1..20 {
        term = scale(&matmul(&term, &x), T::one() / lit(k as f64));
        sum = add(&sum, &term);
    }
    for _ in 0..squarings {
        sum = matmul(&sum, &sum);
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_spd() -> Mat7<f64> {
        let mut a = zeros();
        for i in 0..7 {
            for j in 0..7 {
                a[i][j] = ((i * 7 + j) as f64 * 0.37).sin() * 0.2;
            }
        }
        let mut m = matmul(&a, &transpose(&a));
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        m
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let m = sample_spd();
        let (inv, d) = spd_inverse_det(&m).unwrap();
        assert!(max_abs_diff(&matmul(&m, &inv), &identity()) < 1e-13);
        assert!((d - det(&m)).abs() < 1e-12 * d.abs());
    }

    #[test]
    fn general_inverse_matches() {
        let mut m = sample_spd();
        m[0][3] += 0.5;
        let inv = inverse(&m).unwrap();
        assert!(max_abs_diff(&matmul(&inv, &m), &identity()) < 1e-13);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut m = identity::<f64>();
        m[4][4] = -1.0;
        assert!(cholesky(&m).is_none());
    }

    #[test]
    fn jacobi_eigenvalues_of_diagonal_conjugate() {
        let q = expm(&{
            let mut a = zeros::<f64>();
            a[0][1] = 0.3;
            a[1][0] = -0.3;
            a[2][5] = 1.1;
            a[5][2] = -1.1;
            a
        });
        let mut d = zeros();
        for i in 0..7 {
            d[i][i] = (i + 1) as f64;
        }
        let m = matmul(&matmul(&q, &d), &transpose(&q));
        let ev = sym_eigenvalues(&m);
        for (i, e) in ev.iter().enumerate() {
            assert!((e - (i + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn expm_of_skew_is_orthogonal() {
        let mut a = zeros::<f64>();
        a[1][6] = 2.0;
        a[6][1] = -2.0;
        let q = expm(&a);
        assert!(max_abs_diff(&matmul(&q, &transpose(&q)), &identity()) < 1e-13);
        assert!((q[1][1] - 2f64.cos()).abs() < 1e-13);
    }
}

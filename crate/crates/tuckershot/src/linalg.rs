//! Self-contained dense linear algebra: full/truncated SVD via one-sided
//! Jacobi, and a cyclic Jacobi symmetric eigendecomposition.
//!
//! The contract here is accuracy and bitwise determinism on fixed inputs, not
//! speed on large matrices. Rotation order is fixed, no parallelism, and
//! singular values below `SV_CLAMP_REL * s_max` are clamped to zero so that
//! downstream rank logic never sees noise-level values.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative clamp threshold: singular values below this times the largest are
/// treated as exact zeros.
pub const SV_CLAMP_REL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-15;

/// Thin SVD `A = U diag(s) V^T` with `k = min(rows, cols)`.
///
/// `u` has orthonormal columns, `vt` orthonormal rows, `s` is descending and
/// nonnegative. The first nonzero entry of every column of `u` is nonnegative,
/// which makes results deterministic up to exact ties.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let mut us = Matrix::zeros(self.u.rows(), k);
        for i in 0..self.u.rows() {
            for j in 0..k {
                us.set(i, j, self.u.get(i, j) * self.s[j]);
            }
        }
        us.matmul(&self.vt)
    }
}

/// Full SVD of a dense matrix.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::Numerical("svd: non-finite entries".into()));
    }
    // Work on the tall orientation so the Jacobi sweep rotates the short side.
    let transposed = m.rows() < m.cols();
    let mut b = if transposed { m.transpose() } else { m.clone() };

    // Squared column norms overflow for entries beyond ~1e154; rescale only
    // in that regime so ordinary inputs keep bit-identical results.
    let bmax = b.data().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let prescale = if bmax > 1e150 || (bmax > 0.0 && bmax < 1e-150) {
        for x in b.data_mut() {
            *x /= bmax;
        }
        bmax
    } else {
        1.0
    };

    let (u_b, mut s, v_b) = one_sided_jacobi(b);
    if prescale != 1.0 {
        for sv in s.iter_mut() {
            *sv *= prescale;
        }
    }
    let (u, vt) = if transposed {
        // A = V_B diag(s) U_B^T
        (v_b, u_b.transpose())
    } else {
        (u_b, v_b.transpose())
    };
    let (u, vt) = fix_signs(u, vt);
    Ok(SvdResult { u, s, vt })
}

/// Top-`k` part of the SVD: the best rank-`k` approximation in Frobenius norm.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<SvdResult> {
    let kmax = m.rows().min(m.cols());
    if k == 0 || k > kmax {
        return Err(Error::InvalidArgument(format!(
            "rank {k} out of range 1..={kmax} for {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let full = svd(m)?;
    Ok(SvdResult {
        u: full.u.take_cols(k),
        s: full.s[..k].to_vec(),
        vt: Matrix::from_fn(k, full.vt.cols(), |i, j| full.vt.get(i, j)),
    })
}

/// Singular values only (no factor accumulation).
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.s)
}

/// First `k` left singular vectors, extended with a deterministic
/// orthonormal completion when `k` exceeds `min(rows, cols)`. Needed when a
/// requested Tucker rank is larger than the unfolding's column count.
pub fn left_singular_basis(m: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k > m.rows() {
        return Err(Error::InvalidArgument(format!(
            "basis size {k} out of range 1..={}",
            m.rows()
        )));
    }
    let full = svd(m)?;
    if k <= full.u.cols() {
        return Ok(full.u.take_cols(k));
    }
    let mut u = Matrix::zeros(m.rows(), k);
    for i in 0..m.rows() {
        for j in 0..full.u.cols() {
            u.set(i, j, full.u.get(i, j));
        }
    }
    // mark the extra columns as zero-singular-value slots and complete them
    let mut s = vec![1.0; k];
    for sv in s.iter_mut().skip(full.u.cols()) {
        *sv = 0.0;
    }
    complete_zero_columns(&mut u, &s);
    Ok(u)
}

/// One-sided Jacobi on a tall matrix `b` (rows >= cols). Returns
/// `(U, s, V)` with `b = U diag(s) V^T`, `U` rows x cols, `V` cols x cols.
fn one_sided_jacobi(mut b: Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let m = b.rows();
    let n = b.cols();
    let mut v = Matrix::identity(n);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = 0usize;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated += 1;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    b.set(i, p, c * bp - s * bq);
                    b.set(i, q, s * bp + c * bq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if rotated == 0 {
            break;
        }
    }

    // Column norms are the singular values; sort descending (stable).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &c| norms[c].partial_cmp(&norms[a]).unwrap().then(a.cmp(&c)));

    let s_max = order.first().map(|&j| norms[j]).unwrap_or(0.0);
    let clamp = SV_CLAMP_REL * s_max;

    let mut s = Vec::with_capacity(n);
    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sv = if norms[src] <= clamp { 0.0 } else { norms[src] };
        s.push(sv);
        for i in 0..n {
            v_sorted.set(i, dst, v.get(i, src));
        }
        if sv > 0.0 {
            for i in 0..m {
                u.set(i, dst, b.get(i, src) / sv);
            }
        }
    }
    complete_zero_columns(&mut u, &s);
    (u, s, v_sorted)
}

/// Fill columns of `u` whose singular value is zero with a deterministic
/// orthonormal completion. Zero singular values sort to the end, so column
/// `j` only needs Gram-Schmidt against columns `0..j`.
fn complete_zero_columns(u: &mut Matrix, s: &[f64]) {
    let m = u.rows();
    let n = u.cols();
    let mut next_basis = 0usize;
    for j in 0..n {
        if s[j] > 0.0 {
            continue;
        }
        while next_basis < m {
            let e = next_basis;
            next_basis += 1;
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for k in 0..j {
                let dot: f64 = (0..m).map(|i| cand[i] * u.get(i, k)).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= dot * u.get(i, k);
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, c) in cand.iter().enumerate() {
                    u.set(i, j, c / norm);
                }
                break;
            }
        }
    }
}

/// Flip signs so every column of `u` has a nonnegative first nonzero entry;
/// the matching row of `vt` flips with it.
fn fix_signs(mut u: Matrix, mut vt: Matrix) -> (Matrix, Matrix) {
    let k = u.cols().min(vt.rows());
    for j in 0..k {
        let mut sign = 0.0;
        for i in 0..u.rows() {
            let x = u.get(i, j);
            if x != 0.0 {
                sign = x.signum();
                break;
            }
        }
        if sign < 0.0 {
            for i in 0..u.rows() {
                u.set(i, j, -u.get(i, j));
            }
            for c in 0..vt.cols() {
                vt.set(j, c, -vt.get(j, c));
            }
        }
    }
    (u, vt)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as matrix columns. Input must be symmetric within
/// `1e-10 * max(1, max|entry|)`.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!(
            "sym_eig needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numerical("sym_eig: non-finite entries".into()));
    }
    let n = m.rows();
    let scale = m.data().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let sym_tol = 1e-10 * scale.max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (m.get(i, j) - m.get(j, i)).abs() > sym_tol {
                return Err(Error::InvalidArgument(format!(
                    "sym_eig: matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }

    // Work on the symmetrized copy.
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let mut v = Matrix::identity(n);
    let frob = a.frobenius_norm();
    let stop = 1e-14 * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j).powi(2);
            }
        }
        if (2.0 * off).sqrt() <= stop {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // A <- J^T A J on rows/cols p and q
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&x, &y| diag[y].partial_cmp(&diag[x]).unwrap().then(x.cmp(&y)));
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // sign convention: first nonzero entry nonnegative
        let mut sign = 1.0;
        for i in 0..n {
            let x = v.get(i, src);
            if x != 0.0 {
                sign = x.signum();
                break;
            }
        }
        for i in 0..n {
            vectors.set(i, dst, sign * v.get(i, src));
        }
    }
    Ok((values, vectors))
}

/// Max deviation of `m^T m` from the identity; orthonormality check helper.
pub fn orthonormality_defect(m: &Matrix) -> f64 {
    let g = m.transpose().matmul(m);
    let mut worst = 0.0f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - want).abs());
        }
    }
    worst
}

/// Relative Frobenius distance between two same-shape matrices.
pub fn rel_fro_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut num = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        num += (x - y) * (x - y);
    }
    let denom = a.frobenius_norm();
    if denom == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num.sqrt() / denom
    }
}

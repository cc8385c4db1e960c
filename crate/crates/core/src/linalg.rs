//! Small dense helpers shared by the curvature engine and the diagnostics.
//!
//! Everything here works on `nalgebra` dynamic matrices or plain slices and
//! stays allocation-light; the matrices involved are at most `m_i·p` square
//! on the hot path and `n·p` square in diagnostics.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn mat_vec(m: &Mat, v: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    let mut out = alloc::vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, vj) in v.iter().enumerate() {
            acc += m[(i, j)] * vj;
        }
        *o = acc;
    }
    out
}

/// Replace `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    let n = m.nrows();
    m.ncols() == n
        && (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(m: &Mat) -> (f64, f64) {
    let ev = symmetric_eigenvalues(m);
    (ev[0], ev[ev.len() - 1])
}

/// Solve `m x = b` for symmetric positive definite `m`, falling back to LU
/// when the Cholesky factorization breaks down numerically.
pub fn solve_spd(m: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(b);
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(&rhs).as_slice().to_vec());
    }
    m.clone().lu().solve(&rhs).map(|x| x.as_slice().to_vec())
}

/// Inverse of a symmetric positive definite matrix (Cholesky, LU fallback).
pub fn inverse_spd(m: &Mat) -> Option<Mat> {
    let mut inv = match m.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => m.clone().try_inverse()?,
    };
    symmetrize(&mut inv);
    Some(inv)
}

/// Symmetric positive semidefinite square root and pseudo-inverse square
/// root of `m`, with eigenvalues below `tol` treated as zero.
pub fn psd_sqrt_and_pinv_sqrt(m: &Mat, tol: f64) -> (Mat, Mat) {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let n = m.nrows();
    let mut root = Mat::zeros(n, n);
    let mut pinv_root = Mat::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam <= tol {
            continue;
        }
        let q = eig.eigenvectors.column(k);
        let r = libm::sqrt(lam);
        for i in 0..n {
            for j in 0..n {
                let qq = q[i] * q[j];
                root[(i, j)] += r * qq;
                pinv_root[(i, j)] += qq / r;
            }
        }
    }
    (root, pinv_root)
}

/// `a ⊗ I_p`
pub fn kron_identity(a: &Mat, p: usize) -> Mat {
    let n = a.nrows();
    let mut out = Mat::zeros(n * p, a.ncols() * p);
    for i in 0..n {
        for j in 0..a.ncols() {
            let v = a[(i, j)];
            if v != 0.0 {
                for k in 0..p {
                    out[(i * p + k, j * p + k)] = v;
                }
            }
        }
    }
    out
}

/// Block-diagonal matrix from equally sized square blocks.
pub fn block_diagonal(blocks: &[Mat]) -> Mat {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(total, total);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

pub fn quadratic_form(m: &Mat, v: &[f64]) -> f64 {
    dot(v, &mat_vec(m, v))
}

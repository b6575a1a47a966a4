//! Small dense kernels for the state-space dimension (at most [`MAX_DIM`]).
//!
//! Matrices are row-major slices of length `n * n`. Everything here is
//! allocation free so it can sit inside the integrator and optimizer loops.

use nalgebra::DMatrix;

/// Largest supported state-space dimension.
pub const MAX_DIM: usize = 3;
/// Scratch size for an `n x n` matrix.
pub const MAT: usize = MAX_DIM * MAX_DIM;

/// Lower Cholesky factor of the SPD matrix `a`. Returns `false` if a pivot
/// is not strictly positive.
pub fn cholesky(a: &[f64], n: usize, l: &mut [f64]) -> bool {
    l[..n * n].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return false;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    true
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub fn inverse_spd(a: &[f64], n: usize, inv: &mut [f64]) -> bool {
    let mut l = [0.0; MAT];
    if !cholesky(a, n, &mut l) {
        return false;
    }
    // Columns of L^{-1}, then inv = L^{-T} L^{-1}.
    let mut linv = [0.0; MAT];
    for col in 0..n {
        for i in col..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                sum -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = sum / l[i * n + i];
        }
    }
    for i in 0..n {
        for j in 0..n {
            let mut sum = 0.0;
            for k in i.max(j)..n {
                sum += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = sum;
        }
    }
    true
}

/// `out = a x`.
#[inline]
pub fn mat_vec(a: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        out[i] = (0..n).map(|j| a[i * n + j] * x[j]).sum();
    }
}

/// `out = a^T x`.
#[inline]
pub fn mat_t_vec(a: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    for j in 0..n {
        out[j] = (0..n).map(|i| a[i * n + j] * x[i]).sum();
    }
}

/// `x . a y`.
#[inline]
pub fn bilinear(x: &[f64], a: &[f64], y: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * a[i * n + j] * y[j];
        }
    }
    s
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Frobenius norm.
pub fn frobenius(a: &[f64], n: usize) -> f64 {
    a[..n * n].iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, &a[..n * n]);
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

//! Cholesky factorization of symmetric periodic block-tridiagonal matrices.
//!
//! Eliminating nodes in order `0..m` fills only the last block row, so the
//! factor is stored as diagonal blocks, one sub-diagonal and that row.

use crate::linalg::{self, MAT, MAX_DIM};

pub(crate) struct CyclicCholesky {
    n: usize,
    m: usize,
    diag: Vec<[f64; MAT]>,
    sub: Vec<[f64; MAT]>,
    last: Vec<[f64; MAT]>,
}

fn mul_abt(a: &[f64; MAT], b: &[f64; MAT], n: usize) -> [f64; MAT] {
    let mut out = [0.0; MAT];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| a[i * n + k] * b[j * n + k]).sum();
        }
    }
    out
}

fn transpose(a: &[f64; MAT], n: usize) -> [f64; MAT] {
    let mut out = [0.0; MAT];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

/// `X = B L⁻ᵀ` for lower-triangular `L`, i.e. solves `X Lᵀ = B` row by row.
fn right_solve_lt(b: &[f64; MAT], l: &[f64; MAT], n: usize) -> [f64; MAT] {
    let mut x = [0.0; MAT];
    for r in 0..n {
        for j in 0..n {
            let s: f64 = (0..j).map(|k| x[r * n + k] * l[j * n + k]).sum();
            x[r * n + j] = (b[r * n + j] - s) / l[j * n + j];
        }
    }
    x
}

fn forward(l: &[f64; MAT], b: &mut [f64], n: usize) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

fn backward(l: &[f64; MAT], b: &mut [f64], n: usize) {
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

impl CyclicCholesky {
    /// `diag[k]` is block `(k,k)`, `sub[k]` is block `(k+1 mod m, k)`.
    /// Returns `None` unless the matrix is positive definite; needs `m ≥ 3`.
    pub fn factor(n: usize, diag: &[[f64; MAT]], sub: &[[f64; MAT]], shift: f64) -> Option<Self> {
        let m = diag.len();
        assert!(m >= 3 && sub.len() == m);
        let mut ld = vec![[0.0; MAT]; m];
        let mut ls = vec![[0.0; MAT]; m];
        let mut lr = vec![[0.0; MAT]; m];
        for k in 0..m - 1 {
            let mut d = diag[k];
            for i in 0..n {
                d[i * n + i] += shift;
            }
            if k >= 1 {
                let p = mul_abt(&ls[k - 1], &ls[k - 1], n);
                for i in 0..n * n {
                    d[i] -= p[i];
                }
            }
            if !linalg::cholesky(&d, n, &mut ld[k]) {
                return None;
            }
            if k + 3 <= m {
                ls[k] = right_solve_lt(&sub[k], &ld[k], n);
            }
            let mut a = [0.0; MAT];
            if k == 0 {
                a = transpose(&sub[m - 1], n);
            }
            if k == m - 2 {
                for i in 0..n * n {
                    a[i] += sub[m - 2][i];
                }
            }
            if k >= 1 {
                let p = mul_abt(&lr[k - 1], &ls[k - 1], n);
                for i in 0..n * n {
                    a[i] -= p[i];
                }
            }
            lr[k] = right_solve_lt(&a, &ld[k], n);
        }
        let mut d = diag[m - 1];
        for i in 0..n {
            d[i * n + i] += shift;
        }
        for r in &lr[..m - 1] {
            let p = mul_abt(r, r, n);
            for i in 0..n * n {
                d[i] -= p[i];
            }
        }
        if !linalg::cholesky(&d, n, &mut ld[m - 1]) {
            return None;
        }
        Some(CyclicCholesky {
            n,
            m,
            diag: ld,
            sub: ls,
            last: lr,
        })
    }

    /// Smallest eigenvalue to within `tol`, by bisection on the shift that
    /// makes the matrix positive definite, starting from Gershgorin bounds.
    pub fn min_eigenvalue(n: usize, diag: &[[f64; MAT]], sub: &[[f64; MAT]], tol: f64) -> f64 {
        let m = diag.len();
        let (mut lo, mut hi) = (f64::INFINITY, f64::INFINITY);
        for k in 0..m {
            let prev = &sub[(k + m - 1) % m];
            for i in 0..n {
                let mut off = 0.0;
                for j in 0..n {
                    if j != i {
                        off += diag[k][i * n + j].abs();
                    }
                    off += sub[k][j * n + i].abs() + prev[i * n + j].abs();
                }
                lo = lo.min(diag[k][i * n + i] - off);
                hi = hi.min(diag[k][i * n + i]);
            }
        }
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if Self::factor(n, diag, sub, -mid).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn solve(&self, rhs: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let mut tmp = [0.0; MAX_DIM];
        for k in 0..m - 1 {
            if k >= 1 {
                linalg::mat_vec(&self.sub[k - 1], &rhs[(k - 1) * n..k * n], n, &mut tmp);
                for i in 0..n {
                    rhs[k * n + i] -= tmp[i];
                }
            }
            forward(&self.diag[k], &mut rhs[k * n..(k + 1) * n], n);
        }
        for k in 0..m - 1 {
            linalg::mat_vec(&self.last[k], &rhs[k * n..(k + 1) * n], n, &mut tmp);
            for i in 0..n {
                rhs[(m - 1) * n + i] -= tmp[i];
            }
        }
        forward(&self.diag[m - 1], &mut rhs[(m - 1) * n..], n);
        backward(&self.diag[m - 1], &mut rhs[(m - 1) * n..], n);
        let (head, tail) = rhs.split_at_mut((m - 1) * n);
        for k in (0..m - 1).rev() {
            linalg::mat_t_vec(&self.last[k], tail, n, &mut tmp);
            for i in 0..n {
                head[k * n + i] -= tmp[i];
            }
            if k + 3 <= m {
                let next: Vec<f64> = head[(k + 1) * n..(k + 2) * n].to_vec();
                linalg::mat_t_vec(&self.sub[k], &next, n, &mut tmp);
                for i in 0..n {
                    head[k * n + i] -= tmp[i];
                }
            }
            backward(&self.diag[k], &mut head[k * n..(k + 1) * n], n);
        }
    }
}

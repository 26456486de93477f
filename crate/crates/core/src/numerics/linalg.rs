use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{contract, domain, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-13;
const SYMMETRY_TOL: f64 = 1e-12;

/// Eigen-decomposition of a real symmetric matrix, eigenvalues sorted in
/// descending order. Column `i` of `eigenvectors` belongs to `eigenvalues[i]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SpectralDecomposition {
    /// `V · diag(λ) · Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let mut out = Matrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            for i in 0..n {
                let vik = self.eigenvectors[(i, k)] * lam;
                for j in 0..n {
                    out[(i, j)] += vik * self.eigenvectors[(j, k)];
                }
            }
        }
        out
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return contract(format!("expected a square matrix, got {}x{}", a.rows(), a.cols()));
    }
    if !a.is_finite() {
        return contract("matrix has non-finite entries");
    }
    if !a.is_symmetric(SYMMETRY_TOL * a.max_abs().max(1.0)) {
        return contract("matrix is not symmetric");
    }
    Ok(())
}

/// Cyclic Jacobi eigensolver for small dense symmetric matrices.
pub fn sym_eigen(a: &Matrix) -> Result<SpectralDecomposition> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    // symmetrize exactly so rotations act on a truly symmetric matrix
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let mut converged = false;

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&m) <= JACOBI_OFF_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate_cols(&mut m, p, q, c, s);
                rotate_rows(&mut m, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }
    if !converged && off_diagonal_norm(&m) > JACOBI_OFF_TOL * scale {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        for i in 0..n {
            eigenvectors[(i, k)] = v[(i, src)];
        }
    }
    Ok(SpectralDecomposition { eigenvalues, eigenvectors })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

fn rotate_cols(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let mp = m[(k, p)];
        let mq = m[(k, q)];
        m[(k, p)] = c * mp - s * mq;
        m[(k, q)] = s * mp + c * mq;
    }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let mp = m[(p, k)];
        let mq = m[(q, k)];
        m[(p, k)] = c * mp - s * mq;
        m[(q, k)] = s * mp + c * mq;
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return domain(format!("matrix is not positive definite (pivot {j} = {d:e})"));
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `log det A` for symmetric positive-definite `A`.
pub fn logdet_psd(a: &Matrix) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>())
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(a)?;
    cholesky_solve(&l, b)
}

pub(crate) fn cholesky_solve(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return contract(format!("right-hand side of length {} for {n}x{n} system", b.len()));
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    Ok(y)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    // exact symmetry keeps downstream symmetric checks happy
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = avg;
            inv[(j, i)] = avg;
        }
    }
    Ok(inv)
}

//! Small dense linear algebra and special functions.

mod fd;
mod linalg;
mod matrix;
mod special;

pub use fd::{fd_step, gradient_fd, jacobian_fd};
pub use linalg::{cholesky, logdet_psd, solve_spd, spd_inverse, sym_eigen, SpectralDecomposition};
pub(crate) use linalg::cholesky_solve;
pub use matrix::{dot, inf_norm, norm2, Matrix};
pub use special::{digamma, log_factorial, log_factorial_f64, log_gamma, trigamma};

/// `ln(1 + e^a)` without overflow.
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Logistic sigmoid `1 / (1 + e^{-a})`.
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Sum after sorting, so the result does not depend on input order.
pub fn sum_sorted(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `ln Σ exp(v_i)`; `-inf` for an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

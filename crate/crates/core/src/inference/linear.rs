//! EM and closed-form fits for linear-Gaussian models.

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::models::{LinearGaussianModel, Noise};
use crate::numerics::{solve_spd, sym_eigen, Matrix};

/// Gaussian posterior moments of one row.
pub(crate) struct Moments<'a> {
    pub mean: &'a [f64],
    pub cov: &'a Matrix,
}

pub(crate) fn m_step(m: &LinearGaussianModel, data: &[Vec<f64>], q: &[Moments<'_>]) -> Result<LinearGaussianModel> {
    let (h, d) = (m.latent_dim(), m.obs_dim());
    let n = data.len() as f64;
    // augmented latent (z, 1) so that W and μ are solved jointly
    let mut a = Matrix::zeros(d, h + 1);
    let mut b = Matrix::zeros(h + 1, h + 1);
    for (x, qn) in data.iter().zip(q) {
        for i in 0..d {
            for j in 0..h {
                a[(i, j)] += x[i] * qn.mean[j];
            }
            a[(i, h)] += x[i];
        }
        for j in 0..h {
            for k in 0..h {
                b[(j, k)] += qn.cov[(j, k)] + qn.mean[j] * qn.mean[k];
            }
            b[(j, h)] += qn.mean[j];
            b[(h, j)] += qn.mean[j];
        }
        b[(h, h)] += 1.0;
    }
    let mut w = Matrix::zeros(d, h);
    let mut mu = vec![0.0; d];
    for i in 0..d {
        let row = solve_spd(&b, a.row(i))?;
        for j in 0..h {
            w[(i, j)] = row[j];
        }
        mu[i] = row[h];
    }
    let mut psi = vec![0.0; d];
    for (x, qn) in data.iter().zip(q) {
        for i in 0..d {
            let wi = w.row(i);
            let r = x[i] - wi.iter().zip(qn.mean).map(|(a, b)| a * b).sum::<f64>() - mu[i];
            let spread: f64 = (0..h).map(|j| (0..h).map(|k| wi[j] * qn.cov[(j, k)] * wi[k]).sum::<f64>()).sum();
            psi[i] += r * r + spread;
        }
    }
    psi.iter_mut().for_each(|v| *v /= n);
    let noise = match m.noise() {
        Noise::Scalar { .. } => Noise::Scalar { sigma2: psi.iter().sum::<f64>() / d as f64 },
        Noise::Diagonal { .. } => Noise::Diagonal { sigma2: psi },
    };
    let (m0, v0) = if m.parameterized_prior() {
        let mut m0 = vec![0.0; h];
        for qn in q {
            for j in 0..h {
                m0[j] += qn.mean[j];
            }
        }
        m0.iter_mut().for_each(|v| *v /= n);
        let mut v0 = vec![0.0; h];
        for qn in q {
            for j in 0..h {
                v0[j] += qn.cov[(j, j)] + (qn.mean[j] - m0[j]).powi(2);
            }
        }
        v0.iter_mut().for_each(|v| *v /= n);
        (m0, v0)
    } else {
        (m.prior_mean().to_vec(), m.prior_var().to_vec())
    };
    LinearGaussianModel::new(m0, v0, m.parameterized_prior(), w, mu, noise)
}

/// Gradient with frozen Gaussian posteriors, laid out as
/// `((m₀, v₀) if trainable, w_1, …, w_H, μ, noise)`.
pub(crate) fn gradient(m: &LinearGaussianModel, data: &[Vec<f64>], q: &[Moments<'_>]) -> Result<Vec<f64>> {
    let (h, d) = (m.latent_dim(), m.obs_dim());
    let n = data.len() as f64;
    let psi = m.noise_vars();
    let w = m.w();
    let mut gw = Matrix::zeros(d, h);
    let mut gmu = vec![0.0; d];
    let mut gpsi = vec![0.0; d];
    let mut gm0 = vec![0.0; h];
    let mut gv0 = vec![0.0; h];
    for (x, qn) in data.iter().zip(q) {
        for i in 0..d {
            let wi = w.row(i);
            let r = x[i] - wi.iter().zip(qn.mean).map(|(a, b)| a * b).sum::<f64>() - m.mu()[i];
            let cw: Vec<f64> = (0..h).map(|j| (0..h).map(|k| qn.cov[(j, k)] * wi[k]).sum()).collect();
            let spread: f64 = wi.iter().zip(&cw).map(|(a, b)| a * b).sum();
            for j in 0..h {
                gw[(i, j)] += (r * qn.mean[j] - cw[j]) / psi[i];
            }
            gmu[i] += r / psi[i];
            gpsi[i] += -0.5 / psi[i] + (r * r + spread) / (2.0 * psi[i] * psi[i]);
        }
        if m.parameterized_prior() {
            for j in 0..h {
                let (m0, v0) = (m.prior_mean()[j], m.prior_var()[j]);
                let e = qn.mean[j] - m0;
                gm0[j] += e / v0;
                gv0[j] += 0.5 * ((qn.cov[(j, j)] + e * e) / (v0 * v0) - 1.0 / v0);
            }
        }
    }
    let mut grad = Vec::new();
    if m.parameterized_prior() {
        grad.extend(gm0);
        grad.extend(gv0);
    }
    for j in 0..h {
        grad.extend(gw.col(j));
    }
    grad.extend(gmu);
    match m.noise() {
        Noise::Scalar { .. } => grad.push(gpsi.iter().sum()),
        Noise::Diagonal { .. } => grad.extend(gpsi),
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Maximum-likelihood p-PCA from the eigendecomposition of the sample
/// covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcaFit {
    pub model: LinearGaussianModel,
    /// Sample-covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Columns whose eigenvalue did not exceed `σ²` and were set to zero.
    pub clamped_columns: Vec<usize>,
}

/// `σ² = mean of the D − H smallest eigenvalues`, `W = U_H (Λ_H − σ² I)^{1/2}`,
/// `μ = sample mean`; covariance normalized by `N`.
pub fn fit_ppca_closed_form(data: &[Vec<f64>], h: usize) -> Result<PpcaFit> {
    if data.is_empty() {
        return contract("p-PCA needs data");
    }
    let d = data[0].len();
    if h == 0 || h >= d {
        return domain(format!("p-PCA needs 1 <= H < D, got H = {h}, D = {d}"));
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for x in data {
        if x.len() != d {
            return contract("rows of unequal length");
        }
        for i in 0..d {
            mean[i] += x[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut cov = Matrix::zeros(d, d);
    for x in data {
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = sym_eigen(&cov)?;
    let sigma2 = eig.eigenvalues[h..].iter().sum::<f64>() / (d - h) as f64;
    if !(sigma2 > 0.0) {
        return domain("sample covariance has no residual variance; sigma^2 would be zero");
    }
    let mut w = Matrix::zeros(d, h);
    let mut clamped_columns = Vec::new();
    for j in 0..h {
        let excess = eig.eigenvalues[j] - sigma2;
        if excess <= 0.0 {
            clamped_columns.push(j);
            continue;
        }
        let mut u = eig.eigenvectors.col(j);
        // fix the sign so the largest entry is positive
        let pivot = u.iter().cloned().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..d {
            w[(i, j)] = u[i] * excess.sqrt();
        }
    }
    Ok(PpcaFit { model: LinearGaussianModel::ppca(w, mean, sigma2)?, eigenvalues: eig.eigenvalues, clamped_columns })
}

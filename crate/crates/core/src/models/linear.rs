//! Linear-Gaussian latent models: probabilistic PCA (scalar noise, standard
//! prior), factor analysis (diagonal noise) and variants with a trainable
//! diagonal Gaussian prior.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::efcore::{natural_params_and_jacobian, EfFamily};
use crate::error::{contract, domain, Error, Result};
use crate::numerics::{cholesky, cholesky_solve, spd_inverse, Matrix};

use super::NaturalMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    Scalar { sigma2: f64 },
    Diagonal { sigma2: Vec<f64> },
}

impl Noise {
    fn len(&self) -> usize {
        match self {
            Noise::Scalar { .. } => 1,
            Noise::Diagonal { sigma2 } => sigma2.len(),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Noise::Scalar { sigma2 } => vec![*sigma2],
            Noise::Diagonal { sigma2 } => sigma2.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "LinearRaw")]
pub struct LinearGaussianModel {
    h: usize,
    d: usize,
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
    parameterized_prior: bool,
    w: Matrix,
    mu: Vec<f64>,
    noise: Noise,
}

#[derive(Serialize, Deserialize)]
struct LinearRaw {
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "D")]
    d: usize,
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
    parameterized_prior: bool,
    #[serde(rename = "W")]
    w: Matrix,
    mu: Vec<f64>,
    noise: Noise,
}

impl From<LinearGaussianModel> for LinearRaw {
    fn from(m: LinearGaussianModel) -> Self {
        LinearRaw {
            h: m.h,
            d: m.d,
            prior_mean: m.prior_mean,
            prior_var: m.prior_var,
            parameterized_prior: m.parameterized_prior,
            w: m.w,
            mu: m.mu,
            noise: m.noise,
        }
    }
}

impl<'de> Deserialize<'de> for LinearGaussianModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = LinearRaw::deserialize(de)?;
        if raw.w.rows() != raw.d || raw.w.cols() != raw.h {
            return Err(serde::de::Error::custom(format!(
                "W is {}x{}, expected D x H = {}x{}",
                raw.w.rows(),
                raw.w.cols(),
                raw.d,
                raw.h
            )));
        }
        LinearGaussianModel::new(raw.prior_mean, raw.prior_var, raw.parameterized_prior, raw.w, raw.mu, raw.noise)
            .map_err(serde::de::Error::custom)
    }
}

impl LinearGaussianModel {
    pub fn new(
        prior_mean: Vec<f64>,
        prior_var: Vec<f64>,
        parameterized_prior: bool,
        w: Matrix,
        mu: Vec<f64>,
        noise: Noise,
    ) -> Result<Self> {
        let (d, h) = (w.rows(), w.cols());
        if h == 0 || d == 0 {
            return contract("linear-gaussian needs at least one latent and one observable");
        }
        if prior_mean.len() != h || prior_var.len() != h || mu.len() != d {
            return contract("linear-gaussian prior or offset has the wrong length");
        }
        if let Noise::Diagonal { sigma2 } = &noise {
            if sigma2.len() != d {
                return contract(format!("diagonal noise has {} entries, expected {d}", sigma2.len()));
            }
        }
        if !w.is_finite() || mu.iter().chain(&prior_mean).any(|v| !v.is_finite()) {
            return domain("linear-gaussian means and weights must be finite");
        }
        if prior_var.iter().chain(&noise.values()).any(|&v| !(v > 0.0 && v.is_finite())) {
            return domain("linear-gaussian variances must be positive");
        }
        Ok(LinearGaussianModel { h, d, prior_mean, prior_var, parameterized_prior, w, mu, noise })
    }

    /// p-PCA: prior `N(0, I)` held fixed, scalar noise.
    pub fn ppca(w: Matrix, mu: Vec<f64>, sigma2: f64) -> Result<Self> {
        let h = w.cols();
        Self::new(vec![0.0; h], vec![1.0; h], false, w, mu, Noise::Scalar { sigma2 })
    }

    /// Factor analysis: prior `N(0, I)` held fixed, diagonal noise.
    pub fn factor_analysis(w: Matrix, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let h = w.cols();
        Self::new(vec![0.0; h], vec![1.0; h], false, w, mu, Noise::Diagonal { sigma2 })
    }

    pub fn latent_dim(&self) -> usize {
        self.h
    }

    pub fn obs_dim(&self) -> usize {
        self.d
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn prior_var(&self) -> &[f64] {
        &self.prior_var
    }

    pub fn parameterized_prior(&self) -> bool {
        self.parameterized_prior
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    /// Per-coordinate noise variances.
    pub fn noise_vars(&self) -> Vec<f64> {
        match &self.noise {
            Noise::Scalar { sigma2 } => vec![*sigma2; self.d],
            Noise::Diagonal { sigma2 } => sigma2.clone(),
        }
    }

    /// `μ(z) = Wz + μ`.
    pub fn mean_of(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.h {
            return contract(format!("latent of length {}, expected {}", z.len(), self.h));
        }
        let mut m = self.w.matvec(z)?;
        for (m, o) in m.iter_mut().zip(&self.mu) {
            *m += o;
        }
        Ok(m)
    }

    pub fn log_prior(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.h {
            return contract(format!("latent of length {}, expected {}", z.len(), self.h));
        }
        Ok(diag_gaussian_log_density(z, &self.prior_mean, &self.prior_var))
    }

    pub fn log_likelihood(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        Ok(diag_gaussian_log_density(x, &self.mean_of(z)?, &self.noise_vars()))
    }

    /// Posterior covariance `(Wᵀ Ψ⁻¹ W + V₀⁻¹)⁻¹`; identical for every row.
    pub fn posterior_cov(&self) -> Result<Matrix> {
        spd_inverse(&self.posterior_precision())
    }

    pub fn posterior_precision(&self) -> Matrix {
        let psi = self.noise_vars();
        let mut p = Matrix::zeros(self.h, self.h);
        for i in 0..self.h {
            for j in 0..self.h {
                p[(i, j)] = (0..self.d).map(|d| self.w[(d, i)] * self.w[(d, j)] / psi[d]).sum();
            }
            p[(i, i)] += 1.0 / self.prior_var[i];
        }
        p
    }

    /// Posterior mean `Σ (Wᵀ Ψ⁻¹ (x − μ) + V₀⁻¹ m₀)` given the posterior covariance.
    pub fn posterior_mean(&self, x: &[f64], cov: &Matrix) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let psi = self.noise_vars();
        let r: Vec<f64> = (0..self.d).map(|d| (x[d] - self.mu[d]) / psi[d]).collect();
        let mut b = self.w.tr_matvec(&r)?;
        for (i, b) in b.iter_mut().enumerate() {
            *b += self.prior_mean[i] / self.prior_var[i];
        }
        cov.matvec(&b)
    }

    /// `W V₀ Wᵀ + Ψ`.
    pub fn marginal_cov(&self) -> Matrix {
        let psi = self.noise_vars();
        let mut c = Matrix::zeros(self.d, self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                c[(i, j)] = (0..self.h).map(|h| self.w[(i, h)] * self.prior_var[h] * self.w[(j, h)]).sum();
            }
            c[(i, i)] += psi[i];
        }
        c
    }

    /// Marginal mean `W m₀ + μ`.
    pub fn marginal_mean(&self) -> Vec<f64> {
        self.mean_of(&self.prior_mean).expect("prior mean has latent length")
    }

    pub fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        let l = cholesky(&self.marginal_cov())?;
        let r: Vec<f64> = x.iter().zip(self.marginal_mean()).map(|(x, m)| x - m).collect();
        let sol = cholesky_solve(&l, &r)?;
        let quad: f64 = r.iter().zip(&sol).map(|(a, b)| a * b).sum();
        let logdet = 2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (self.d as f64 * (2.0 * PI).ln() + logdet + quad))
    }

    /// `(m₀, v₀)` when the prior is trainable.
    pub fn prior_params(&self) -> Result<Vec<f64>> {
        if !self.parameterized_prior {
            return Err(Error::NotApplicable(
                "the standard linear-gaussian prior N(0, I) has no parameters".into(),
            ));
        }
        Ok(self.prior_mean.iter().chain(&self.prior_var).cloned().collect())
    }

    pub fn with_prior_params(&self, psi: &[f64]) -> Result<Self> {
        self.prior_params()?;
        if psi.len() != 2 * self.h {
            return contract(format!("prior vector of length {}, expected {}", psi.len(), 2 * self.h));
        }
        let mut m = self.clone();
        m.prior_mean = psi[..self.h].to_vec();
        m.prior_var = psi[self.h..].to_vec();
        Self::new(m.prior_mean, m.prior_var, true, m.w, m.mu, m.noise)
    }

    /// `ζ` of the diagonal Gaussian prior with `α = (0, −v₀)`.
    pub fn prior_natural_map(&self) -> Result<NaturalMap> {
        let psi = self.prior_params()?;
        let (natural, jacobian) = natural_params_and_jacobian(EfFamily::GaussianDiagonal, &psi)?;
        let coefficients = vec![0.0; self.h].into_iter().chain(self.prior_var.iter().map(|v| -v)).collect();
        Ok(NaturalMap { natural, jacobian, coefficients })
    }

    /// `(w_1, …, w_H, μ, noise)` with `w_h` the `h`-th column of `W`.
    pub fn observable_params(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.d * (self.h + 1) + self.noise.len());
        for h in 0..self.h {
            theta.extend(self.w.col(h));
        }
        theta.extend_from_slice(&self.mu);
        theta.extend(self.noise.values());
        theta
    }

    pub fn with_observable_params(&self, theta: &[f64]) -> Result<Self> {
        let (d, h) = (self.d, self.h);
        let n = d * (h + 1) + self.noise.len();
        if theta.len() != n {
            return contract(format!("linear-gaussian observable vector has length {}, expected {n}", theta.len()));
        }
        let cols: Vec<Vec<f64>> = (0..h).map(|k| theta[k * d..(k + 1) * d].to_vec()).collect();
        let w = Matrix::from_cols(&cols)?;
        let mu = theta[h * d..(h + 1) * d].to_vec();
        let noise = match self.noise {
            Noise::Scalar { .. } => Noise::Scalar { sigma2: theta[n - 1] },
            Noise::Diagonal { .. } => Noise::Diagonal { sigma2: theta[(h + 1) * d..].to_vec() },
        };
        Self::new(self.prior_mean.clone(), self.prior_var.clone(), self.parameterized_prior, w, mu, noise)
    }

    /// Indices of the noise variances inside the observable vector.
    pub fn theta_subset(&self) -> Vec<usize> {
        let start = self.d * (self.h + 1);
        (start..start + self.noise.len()).collect()
    }

    /// Observable natural parameters at `z`, Jacobian over the noise
    /// variances and `β = −σ̃`.
    ///
    /// Scalar noise uses the layout `(μ(z)/σ², −1/(2σ²))`; diagonal noise
    /// uses `(μ_d(z)/σ_d² …, −1/(2σ_d²) …)`.
    pub fn observable_natural_map(&self, z: &[f64]) -> Result<NaturalMap> {
        let m = self.mean_of(z)?;
        let d = self.d;
        match &self.noise {
            Noise::Scalar { sigma2 } => {
                let s = *sigma2;
                let mut natural: Vec<f64> = m.iter().map(|v| v / s).collect();
                natural.push(-0.5 / s);
                let col: Vec<f64> = natural.iter().map(|e| -e / s).collect();
                let jacobian = Matrix::from_vec(d + 1, 1, col)?;
                Ok(NaturalMap { natural, jacobian, coefficients: vec![-s] })
            }
            Noise::Diagonal { sigma2 } => {
                let mut natural = vec![0.0; 2 * d];
                let mut jacobian = Matrix::zeros(2 * d, d);
                for i in 0..d {
                    let s = sigma2[i];
                    natural[i] = m[i] / s;
                    natural[d + i] = -0.5 / s;
                    jacobian[(i, i)] = -m[i] / (s * s);
                    jacobian[(d + i, i)] = 0.5 / (s * s);
                }
                Ok(NaturalMap { natural, jacobian, coefficients: sigma2.iter().map(|s| -s).collect() })
            }
        }
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d || x.iter().any(|v| !v.is_finite()) {
            return contract(format!("observation must be a finite vector of length {}", self.d));
        }
        Ok(())
    }
}

pub(crate) fn diag_gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (2.0 * PI * v).ln() - (x - m) * (x - m) / (2.0 * v))
        .sum()
}

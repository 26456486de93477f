//! Exponential-family building blocks: natural parameters, log-partition
//! functions, entropies and pseudo-entropies.
//!
//! Every family here is written as `h(x) exp(ηᵀT(x) − A(η))` with additive
//! constants folded into `A`, so the base measure is exactly 1 for all
//! families except the Poisson product, where `h(x) = Π_d 1/x_d!`.
//! All logarithms are natural.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::numerics::{digamma, log_factorial_f64, log_gamma, logdet_psd, sigmoid, softplus, sum_sorted, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EfFamily {
    BernoulliProduct,
    /// `C − 1` natural parameters, class `C` is the reference.
    Categorical,
    GaussianScalarVar,
    GaussianDiagonal,
    /// Product of independent Gamma(shape, rate) coordinates.
    Gamma,
    PoissonProduct,
}

impl EfFamily {
    pub fn has_constant_base_measure(self) -> bool {
        !matches!(self, EfFamily::PoissonProduct)
    }

    pub fn name(self) -> &'static str {
        match self {
            EfFamily::BernoulliProduct => "bernoulli-product",
            EfFamily::Categorical => "categorical",
            EfFamily::GaussianScalarVar => "gaussian-scalar-var",
            EfFamily::GaussianDiagonal => "gaussian-diagonal",
            EfFamily::Gamma => "gamma",
            EfFamily::PoissonProduct => "poisson-product",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyKind {
    Entropy,
    PseudoEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyValue {
    pub value: f64,
    pub kind: EntropyKind,
}

impl EntropyValue {
    fn entropy(value: f64) -> Self {
        Self { value, kind: EntropyKind::Entropy }
    }

    fn pseudo(value: f64) -> Self {
        Self { value, kind: EntropyKind::PseudoEntropy }
    }
}

/// A member of one of the supported families, held in natural parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfDistribution {
    family: EfFamily,
    natural_params: Vec<f64>,
}

impl EfDistribution {
    pub fn new(family: EfFamily, natural_params: Vec<f64>) -> Result<Self> {
        check_natural_domain(family, &natural_params)?;
        Ok(Self { family, natural_params })
    }

    pub fn from_standard(family: EfFamily, standard: &[f64]) -> Result<Self> {
        let (eta, _) = natural_params_and_jacobian(family, standard)?;
        Self::new(family, eta)
    }

    pub fn family(&self) -> EfFamily {
        self.family
    }

    pub fn natural_params(&self) -> &[f64] {
        &self.natural_params
    }

    pub fn sufficient_statistic_arity(&self) -> usize {
        self.natural_params.len()
    }

    /// `A(η)`.
    pub fn log_partition(&self) -> f64 {
        log_partition(self.family, &self.natural_params)
    }

    /// `∇_η A(η)`, i.e. the mean of the sufficient statistics.
    pub fn grad_log_partition(&self) -> Vec<f64> {
        grad_log_partition(self.family, &self.natural_params)
    }

    /// `ln h(x)`; zero except for the Poisson product.
    pub fn log_base_measure(&self, x: &[f64]) -> Result<f64> {
        log_base_measure(self.family, x)
    }

    /// `T(x)` for an observation of the matching dimension.
    pub fn sufficient_statistics(&self, x: &[f64]) -> Result<Vec<f64>> {
        sufficient_statistics(self.family, x, self.natural_params.len())
    }

    /// `ln h(x) + ηᵀT(x) − A(η)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let t = self.sufficient_statistics(x)?;
        let inner: f64 = self.natural_params.iter().zip(&t).map(|(e, t)| e * t).sum();
        Ok(self.log_base_measure(x)? + inner - self.log_partition())
    }
}

fn sufficient_statistics(family: EfFamily, x: &[f64], arity: usize) -> Result<Vec<f64>> {
    let expected = match family {
        EfFamily::BernoulliProduct | EfFamily::PoissonProduct => arity,
        EfFamily::GaussianScalarVar => arity - 1,
        EfFamily::GaussianDiagonal | EfFamily::Gamma => arity / 2,
        EfFamily::Categorical => 1,
    };
    if x.len() != expected {
        return contract(format!("{} expects observations of length {expected}, got {}", family.name(), x.len()));
    }
    match family {
        EfFamily::BernoulliProduct => {
            if x.iter().any(|&v| v != 0.0 && v != 1.0) {
                return domain("bernoulli observations must be 0 or 1");
            }
            Ok(x.to_vec())
        }
        EfFamily::Categorical => {
            let c = x[0];
            if c.fract() != 0.0 || c < 0.0 || c > arity as f64 {
                return domain(format!("class index {c} out of range"));
            }
            Ok((0..arity).map(|i| if i as f64 == c { 1.0 } else { 0.0 }).collect())
        }
        EfFamily::GaussianScalarVar => {
            let mut t = x.to_vec();
            t.push(x.iter().map(|v| v * v).sum());
            Ok(t)
        }
        EfFamily::GaussianDiagonal => Ok(x.iter().cloned().chain(x.iter().map(|v| v * v)).collect()),
        EfFamily::Gamma => {
            if x.iter().any(|&v| !(v > 0.0)) {
                return domain("gamma observations must be positive");
            }
            Ok(x.iter().map(|v| v.ln()).chain(x.iter().cloned()).collect())
        }
        EfFamily::PoissonProduct => {
            if x.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                return domain("poisson observations must be non-negative integers");
            }
            Ok(x.to_vec())
        }
    }
}

fn check_natural_domain(family: EfFamily, eta: &[f64]) -> Result<()> {
    if eta.iter().any(|v| !v.is_finite()) {
        return domain("natural parameters must be finite");
    }
    let n = eta.len();
    match family {
        EfFamily::BernoulliProduct | EfFamily::Categorical | EfFamily::PoissonProduct => Ok(()),
        EfFamily::GaussianScalarVar => {
            if n < 2 {
                return contract("gaussian-scalar-var needs D + 1 >= 2 natural parameters");
            }
            if eta[n - 1] >= 0.0 {
                return domain("gaussian precision component must be negative");
            }
            Ok(())
        }
        EfFamily::GaussianDiagonal | EfFamily::Gamma => {
            if n == 0 || !n.is_multiple_of(2) {
                return contract(format!("{} needs 2D natural parameters", family.name()));
            }
            let d = n / 2;
            if eta[d..].iter().any(|&b| b >= 0.0) {
                return domain(format!("{}: second natural parameter block must be negative", family.name()));
            }
            if family == EfFamily::Gamma && eta[..d].iter().any(|&a| a <= -1.0) {
                return domain("gamma: shape - 1 must exceed -1");
            }
            Ok(())
        }
    }
}

fn log_partition(family: EfFamily, eta: &[f64]) -> f64 {
    match family {
        EfFamily::BernoulliProduct => eta.iter().map(|&e| softplus(e)).sum(),
        EfFamily::Categorical => {
            // ln(1 + Σ e^{η_i}) with the reference class contributing e^0
            let m = eta.iter().cloned().fold(0.0, f64::max);
            m + ((-m).exp() + eta.iter().map(|e| (e - m).exp()).sum::<f64>()).ln()
        }
        EfFamily::GaussianScalarVar => {
            let (mean_part, last) = eta.split_at(eta.len() - 1);
            let b = last[0];
            let d = mean_part.len() as f64;
            -mean_part.iter().map(|a| a * a).sum::<f64>() / (4.0 * b) + 0.5 * d * (-PI / b).ln()
        }
        EfFamily::GaussianDiagonal => {
            let d = eta.len() / 2;
            (0..d)
                .map(|i| {
                    let (a, b) = (eta[i], eta[d + i]);
                    -a * a / (4.0 * b) + 0.5 * (-PI / b).ln()
                })
                .sum()
        }
        EfFamily::Gamma => {
            let d = eta.len() / 2;
            (0..d)
                .map(|i| {
                    let alpha = eta[i] + 1.0;
                    let rate = -eta[d + i];
                    log_gamma(alpha).unwrap_or(f64::NAN) - alpha * rate.ln()
                })
                .sum()
        }
        EfFamily::PoissonProduct => eta.iter().map(|e| e.exp()).sum(),
    }
}

fn grad_log_partition(family: EfFamily, eta: &[f64]) -> Vec<f64> {
    match family {
        EfFamily::BernoulliProduct => eta.iter().map(|&e| sigmoid(e)).collect(),
        EfFamily::Categorical => {
            let a = log_partition(family, eta);
            eta.iter().map(|e| (e - a).exp()).collect()
        }
        EfFamily::GaussianScalarVar => {
            let (mean_part, last) = eta.split_at(eta.len() - 1);
            let b = last[0];
            let d = mean_part.len() as f64;
            let mut g: Vec<f64> = mean_part.iter().map(|a| -a / (2.0 * b)).collect();
            g.push(mean_part.iter().map(|a| a * a).sum::<f64>() / (4.0 * b * b) - d / (2.0 * b));
            g
        }
        EfFamily::GaussianDiagonal => {
            let d = eta.len() / 2;
            let mut g = vec![0.0; 2 * d];
            for i in 0..d {
                let (a, b) = (eta[i], eta[d + i]);
                g[i] = -a / (2.0 * b);
                g[d + i] = a * a / (4.0 * b * b) - 1.0 / (2.0 * b);
            }
            g
        }
        EfFamily::Gamma => {
            let d = eta.len() / 2;
            let mut g = vec![0.0; 2 * d];
            for i in 0..d {
                let alpha = eta[i] + 1.0;
                let rate = -eta[d + i];
                g[i] = digamma(alpha).unwrap_or(f64::NAN) - rate.ln();
                g[d + i] = alpha / rate;
            }
            g
        }
        EfFamily::PoissonProduct => eta.iter().map(|e| e.exp()).collect(),
    }
}

fn log_base_measure(family: EfFamily, x: &[f64]) -> Result<f64> {
    match family {
        EfFamily::PoissonProduct => {
            let mut s = 0.0;
            for &v in x {
                s -= log_factorial_f64(v)?;
            }
            Ok(s)
        }
        _ => Ok(0.0),
    }
}

fn open_unit(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        domain(format!("{what} must lie strictly inside (0, 1), got {p}"))
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        domain(format!("{what} must be positive and finite, got {v}"))
    }
}

/// `Σ_h H[Bern(π_h)]`.
pub fn bernoulli_product_entropy(pi: &[f64]) -> Result<EntropyValue> {
    let mut terms = Vec::with_capacity(pi.len());
    for &p in pi {
        open_unit(p, "bernoulli probability")?;
        terms.push(-(p * p.ln() + (1.0 - p) * (-p).ln_1p()));
    }
    Ok(EntropyValue::entropy(sum_sorted(terms)))
}

/// Entropy of a Bernoulli given by its logit; accurate when the mean rounds
/// to 0 or 1.
pub(crate) fn bernoulli_entropy_from_logit(a: f64) -> f64 {
    let s = sigmoid(a);
    s * softplus(-a) + (1.0 - s) * softplus(a)
}

pub fn categorical_entropy(pi: &[f64]) -> Result<EntropyValue> {
    if pi.is_empty() {
        return contract("categorical distribution needs at least one class");
    }
    if pi.iter().any(|&p| !(p > 0.0)) {
        return domain("categorical probabilities must be positive");
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return domain(format!("categorical probabilities sum to {total}, not 1"));
    }
    Ok(EntropyValue::entropy(sum_sorted(pi.iter().map(|p| -p * p.ln()).collect())))
}

/// `−Σ p ln p` with `0 ln 0 = 0`; for responsibilities that may underflow.
pub(crate) fn discrete_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `(D/2) ln(2πe σ²)`.
pub fn gaussian_entropy_scalar(dim: usize, sigma2: f64) -> Result<EntropyValue> {
    positive(sigma2, "variance")?;
    if dim == 0 {
        return contract("dimension must be at least 1");
    }
    Ok(EntropyValue::entropy(0.5 * dim as f64 * (2.0 * PI * E * sigma2).ln()))
}

pub fn gaussian_entropy_diagonal(sigma2: &[f64]) -> Result<EntropyValue> {
    let mut terms = Vec::with_capacity(sigma2.len());
    for &s in sigma2 {
        positive(s, "variance")?;
        terms.push(0.5 * (2.0 * PI * E * s).ln());
    }
    Ok(EntropyValue::entropy(sum_sorted(terms)))
}

/// `½ ln((2πe)^H det Σ)`.
pub fn gaussian_entropy_full(sigma: &Matrix) -> Result<EntropyValue> {
    let h = sigma.rows() as f64;
    let logdet = logdet_psd(sigma)?;
    Ok(EntropyValue::entropy(0.5 * (h * (2.0 * PI * E).ln() + logdet)))
}

/// Entropy of Gamma(shape `alpha`, rate `beta`).
pub fn gamma_entropy(alpha: f64, beta: f64) -> Result<EntropyValue> {
    positive(alpha, "gamma shape")?;
    positive(beta, "gamma rate")?;
    let h = alpha - beta.ln() + log_gamma(alpha)? + (1.0 - alpha) * digamma(alpha)?;
    Ok(EntropyValue::entropy(h))
}

/// `Σ_d λ_d (1 − ln λ_d)`, the Poisson entropy with the `1/x!` base measure dropped.
pub fn poisson_pseudo_entropy(lambda: &[f64]) -> Result<EntropyValue> {
    let mut terms = Vec::with_capacity(lambda.len());
    for &l in lambda {
        positive(l, "poisson rate")?;
        terms.push(l * (1.0 - l.ln()));
    }
    Ok(EntropyValue::pseudo(sum_sorted(terms)))
}

/// `−ηᵀ∇A(η) + A(η)`. Reported as an entropy when the base measure is
/// constant, since both coincide there.
pub fn pseudo_entropy_generic(dist: &EfDistribution) -> Result<EntropyValue> {
    let eta = dist.natural_params();
    let grad = dist.grad_log_partition();
    let value = -eta.iter().zip(&grad).map(|(e, g)| e * g).sum::<f64>() + dist.log_partition();
    if !value.is_finite() {
        return domain("pseudo-entropy is not finite at these natural parameters");
    }
    Ok(if dist.family().has_constant_base_measure() {
        EntropyValue::entropy(value)
    } else {
        EntropyValue::pseudo(value)
    })
}

/// Maps standard parameters to natural parameters and returns the analytic
/// Jacobian `∂η/∂(standard)ᵀ`.
///
/// Standard layouts: Bernoulli `π`; categorical the free probabilities
/// `(π_1, …, π_{C−1})`; Gaussian scalar `(μ_1..μ_D, σ²)`; Gaussian diagonal
/// `(μ_1..μ_D, σ²_1..σ²_D)`; Gamma `(α_1..α_D, β_1..β_D)`; Poisson `λ`.
pub fn natural_params_and_jacobian(family: EfFamily, standard: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let n = standard.len();
    match family {
        EfFamily::BernoulliProduct => {
            let mut eta = Vec::with_capacity(n);
            let mut jac = Matrix::zeros(n, n);
            for (h, &p) in standard.iter().enumerate() {
                open_unit(p, "bernoulli probability")?;
                eta.push((p / (1.0 - p)).ln());
                jac[(h, h)] = 1.0 / (p * (1.0 - p));
            }
            Ok((eta, jac))
        }
        EfFamily::Categorical => {
            let rest = 1.0 - standard.iter().sum::<f64>();
            for &p in standard {
                positive(p, "categorical probability")?;
            }
            positive(rest, "reference class probability")?;
            let eta = standard.iter().map(|p| (p / rest).ln()).collect();
            let mut jac = Matrix::zeros(n, n);
            for i in 0..n {
                for c in 0..n {
                    jac[(i, c)] = 1.0 / rest + if i == c { 1.0 / standard[i] } else { 0.0 };
                }
            }
            Ok((eta, jac))
        }
        EfFamily::GaussianScalarVar => {
            if n < 2 {
                return contract("gaussian-scalar-var needs (mu_1..mu_D, sigma2)");
            }
            let d = n - 1;
            let s = standard[d];
            positive(s, "variance")?;
            let mut eta: Vec<f64> = standard[..d].iter().map(|m| m / s).collect();
            eta.push(-1.0 / (2.0 * s));
            let mut jac = Matrix::zeros(n, n);
            for i in 0..d {
                jac[(i, i)] = 1.0 / s;
                jac[(i, d)] = -standard[i] / (s * s);
            }
            jac[(d, d)] = 1.0 / (2.0 * s * s);
            Ok((eta, jac))
        }
        EfFamily::GaussianDiagonal => {
            if n == 0 || !n.is_multiple_of(2) {
                return contract("gaussian-diagonal needs (mu_1..mu_D, sigma2_1..sigma2_D)");
            }
            let d = n / 2;
            let mut eta = vec![0.0; n];
            let mut jac = Matrix::zeros(n, n);
            for i in 0..d {
                let (m, s) = (standard[i], standard[d + i]);
                positive(s, "variance")?;
                eta[i] = m / s;
                eta[d + i] = -1.0 / (2.0 * s);
                jac[(i, i)] = 1.0 / s;
                jac[(i, d + i)] = -m / (s * s);
                jac[(d + i, d + i)] = 1.0 / (2.0 * s * s);
            }
            Ok((eta, jac))
        }
        EfFamily::Gamma => {
            if n == 0 || !n.is_multiple_of(2) {
                return contract("gamma needs (alpha_1..alpha_D, beta_1..beta_D)");
            }
            let d = n / 2;
            let mut eta = vec![0.0; n];
            let mut jac = Matrix::zeros(n, n);
            for i in 0..d {
                positive(standard[i], "gamma shape")?;
                positive(standard[d + i], "gamma rate")?;
                eta[i] = standard[i] - 1.0;
                eta[d + i] = -standard[d + i];
                jac[(i, i)] = 1.0;
                jac[(d + i, d + i)] = -1.0;
            }
            Ok((eta, jac))
        }
        EfFamily::PoissonProduct => {
            let mut eta = Vec::with_capacity(n);
            let mut jac = Matrix::zeros(n, n);
            for (i, &l) in standard.iter().enumerate() {
                positive(l, "poisson rate")?;
                eta.push(l.ln());
                jac[(i, i)] = 1.0 / l;
            }
            Ok((eta, jac))
        }
    }
}

//! ELBO, entropy sum and the stationary-point verdict.
//!
//! At a stationary point the ELBO equals
//! `(1/N) Σ_n H[q_n] − H[p(z)] − E_q̄[H[p(x|z)]]` with `q̄` the average of
//! the per-row variational distributions. For observables with a
//! data-dependent base measure the same holds for the pseudo-ELBO and
//! pseudo-entropies.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::efcore::{
    bernoulli_entropy_from_logit, bernoulli_product_entropy, discrete_entropy, gamma_entropy,
    gaussian_entropy_diagonal, gaussian_entropy_full, pseudo_entropy_generic, EfDistribution, EfFamily,
    EntropyKind,
};
use crate::error::{contract, domain, Error, Result};
use crate::inference::{e_step, FitReport, Stationarity, VariationalState};
use crate::models::{Dataset, EfMixtureModel, LinearGaussianModel, ModelSpec, Posterior, SbnModel};
use crate::numerics::{logdet_psd, Matrix};

pub const DEFAULT_EQUALITY_TOL: f64 = 1e-6;
/// Tolerance on `Σ q = 1` for user-supplied discrete distributions.
const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyDecomposition {
    pub mean_q_entropy: f64,
    pub prior_entropy: f64,
    pub expected_obs_entropy: f64,
    pub total: f64,
    pub kind: EntropyKind,
}

/// Per-row ELBO pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowTerms {
    pub expected_log_likelihood: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    /// ELBO, or pseudo-ELBO when the entropy sum is of pseudo kind.
    pub elbo: f64,
    pub entropy_sum: f64,
    pub decomposition: EntropyDecomposition,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub tolerance: f64,
    pub stationarity_evidence: Stationarity,
    pub converged: bool,
    pub pass: bool,
    pub reason: Option<String>,
}

fn check_rows(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<()> {
    if q.rows.len() != data.len() {
        return contract(format!("{} variational rows for {} data rows", q.rows.len(), data.len()));
    }
    if data.dim() != model.obs_dim() {
        return contract(format!("data dimension {} but model expects {}", data.dim(), model.obs_dim()));
    }
    Ok(())
}

fn check_simplex(p: &[f64], k: usize) -> Result<()> {
    if p.len() != k {
        return contract(format!("discrete q over {} states, model has {k}", p.len()));
    }
    if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return contract("discrete q must be a probability vector");
    }
    Ok(())
}

fn discrete_q(model: &ModelSpec, q: &VariationalState, k: usize) -> Result<Vec<Vec<f64>>> {
    q.rows
        .iter()
        .map(|row| match row {
            Posterior::Discrete(p) => {
                check_simplex(p, k)?;
                Ok(p.clone())
            }
            Posterior::Gaussian { .. } => contract(format!("{} needs discrete q", model.family().name())),
        })
        .collect()
}

fn gaussian_q(q: &VariationalState, h: usize) -> Result<Vec<(&[f64], &Matrix)>> {
    q.rows
        .iter()
        .map(|row| match row {
            Posterior::Gaussian { mean, cov } if mean.len() == h && cov.rows() == h && cov.cols() == h => {
                Ok((mean.as_slice(), cov))
            }
            _ => contract(format!("linear-gaussian needs Gaussian q over R^{h}")),
        })
        .collect()
}

/// Discrete rows: `E_q[log p(x|z)] = Σ_s q_s (log p(x, z_s) − log p(z_s))`,
/// `KL = Σ_s q_s (log q_s − log p(z_s))`, skipping states with `q_s = 0`.
fn discrete_terms(q: &[f64], log_joint: &[f64], log_prior: &[f64]) -> RowTerms {
    let mut ell = 0.0;
    let mut kl = 0.0;
    for s in 0..q.len() {
        if q[s] > 0.0 {
            ell += q[s] * (log_joint[s] - log_prior[s]);
            kl += q[s] * (q[s].ln() - log_prior[s]);
        }
    }
    RowTerms { expected_log_likelihood: ell, kl }
}

fn sbn_terms(m: &SbnModel, data: &Dataset, q: &[Vec<f64>]) -> Result<Vec<RowTerms>> {
    let table = m.state_table()?;
    let log_prior: Vec<f64> = table.iter().map(|(_, lp)| *lp).collect();
    data.rows()
        .iter()
        .zip(q)
        .map(|(x, qn)| Ok(discrete_terms(qn, &m.log_joint_all(x, &table)?, &log_prior)))
        .collect()
}

fn mixture_terms(m: &EfMixtureModel, data: &Dataset, q: &[Vec<f64>]) -> Result<Vec<RowTerms>> {
    let dists = m.distributions()?;
    let log_prior: Vec<f64> = m.pi().iter().map(|p| p.ln()).collect();
    data.rows()
        .iter()
        .zip(q)
        .map(|(x, qn)| Ok(discrete_terms(qn, &m.log_joint_all(x, &dists)?, &log_prior)))
        .collect()
}

/// Closed-form Gaussian integrals for `q = N(m, Σ)`.
fn linear_terms(m: &LinearGaussianModel, data: &Dataset, q: &[(&[f64], &Matrix)]) -> Result<Vec<RowTerms>> {
    let (h, d) = (m.latent_dim(), m.obs_dim());
    let psi = m.noise_vars();
    let w = m.w();
    let log_v0: f64 = m.prior_var().iter().map(|v| v.ln()).sum();
    data.rows()
        .iter()
        .zip(q)
        .map(|(x, (mean, cov))| {
            let mut ell = 0.0;
            for i in 0..d {
                let wi = w.row(i);
                let r = x[i] - wi.iter().zip(*mean).map(|(a, b)| a * b).sum::<f64>() - m.mu()[i];
                let spread: f64 =
                    (0..h).map(|j| (0..h).map(|k| wi[j] * cov[(j, k)] * wi[k]).sum::<f64>()).sum();
                ell += -0.5 * (2.0 * PI * psi[i]).ln() - (r * r + spread) / (2.0 * psi[i]);
            }
            let mut trace_maha = 0.0;
            for j in 0..h {
                let e = mean[j] - m.prior_mean()[j];
                trace_maha += (cov[(j, j)] + e * e) / m.prior_var()[j];
            }
            let kl = 0.5 * (trace_maha - h as f64 + log_v0 - logdet_psd(cov)?);
            Ok(RowTerms { expected_log_likelihood: ell, kl })
        })
        .collect()
}

/// Per-row expected log-likelihood and KL divergence to the prior.
pub fn elbo_terms(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<Vec<RowTerms>> {
    check_rows(model, data, q)?;
    match model {
        ModelSpec::Sbn(m) => sbn_terms(m, data, &discrete_q(model, q, m.num_states()?)?),
        ModelSpec::Mixture(m) => mixture_terms(m, data, &discrete_q(model, q, m.num_components())?),
        ModelSpec::LinearGaussian(m) => linear_terms(m, data, &gaussian_q(q, m.latent_dim())?),
    }
}

/// `(1/N) Σ_n (E_q[log p(x_n|z)] − KL(q_n ‖ p(z)))`.
pub fn elbo(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<f64> {
    let terms = elbo_terms(model, data, q)?;
    Ok(terms.iter().map(|t| t.expected_log_likelihood - t.kl).sum::<f64>() / data.len() as f64)
}

/// `(1/N) Σ_n log h(x_n)`; zero for constant base measures.
pub fn mean_log_base_measure(model: &ModelSpec, data: &Dataset) -> Result<f64> {
    let ModelSpec::Mixture(m) = model else { return Ok(0.0) };
    if model.has_constant_base_measure() {
        return Ok(0.0);
    }
    let dist = m.component_distribution(0)?;
    let mut total = 0.0;
    for x in data.rows() {
        total += dist.log_base_measure(x)?;
    }
    Ok(total / data.len() as f64)
}

/// `F − (1/N) Σ_n log h(x_n)`.
pub fn pseudo_elbo(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<f64> {
    Ok(elbo(model, data, q)? - mean_log_base_measure(model, data)?)
}

/// `q̄(z) = (1/N) Σ_n q_n(z)` for discrete latents.
pub fn aggregate_posterior(q: &VariationalState) -> Result<Vec<f64>> {
    let first = match q.rows.first() {
        Some(Posterior::Discrete(p)) => p.len(),
        Some(Posterior::Gaussian { .. }) => {
            return Err(Error::Unsupported(
                "the aggregate posterior of continuous latents is not materialized".into(),
            ))
        }
        None => return contract("empty variational state"),
    };
    let mut bar = vec![0.0; first];
    for row in &q.rows {
        let Posterior::Discrete(p) = row else {
            return contract("mixed discrete and Gaussian rows");
        };
        check_simplex(p, first)?;
        for (b, v) in bar.iter_mut().zip(p) {
            *b += v;
        }
    }
    let n = q.rows.len() as f64;
    bar.iter_mut().for_each(|b| *b /= n);
    Ok(bar)
}

/// Entropy sum of the kind natural to the model: pseudo for non-constant
/// base measures, ordinary otherwise.
pub fn entropy_sum(model: &ModelSpec, q: &VariationalState) -> Result<EntropyDecomposition> {
    let kind = if model.has_constant_base_measure() { EntropyKind::Entropy } else { EntropyKind::PseudoEntropy };
    entropy_sum_with(model, q, kind)
}

/// Entropy of a distribution computed as `−ηᵀ∇A + A`.
fn pseudo(family: EfFamily, natural: Vec<f64>) -> Result<f64> {
    Ok(pseudo_entropy_generic(&EfDistribution::new(family, natural)?)?.value)
}

fn categorical_natural(p: &[f64]) -> Vec<f64> {
    let last = p[p.len() - 1];
    p[..p.len() - 1].iter().map(|v| (v / last).ln()).collect()
}

/// Entropy of a discrete `q` row; states with zero mass contribute nothing.
fn discrete_entropy_of(p: &[f64], kind: EntropyKind) -> Result<f64> {
    let support: Vec<f64> = p.iter().cloned().filter(|&v| v > 0.0).collect();
    if support.len() == 1 {
        return Ok(0.0);
    }
    let s: f64 = support.iter().sum();
    let support: Vec<f64> = support.iter().map(|v| v / s).collect();
    match kind {
        EntropyKind::Entropy => Ok(discrete_entropy(&support)),
        EntropyKind::PseudoEntropy => pseudo(EfFamily::Categorical, categorical_natural(&support)),
    }
}

/// Entropy sum with an explicit kind. `PseudoEntropy` evaluates every term
/// through `−ηᵀ∇A + A`; `Entropy` is unsupported for the Poisson mixture.
pub fn entropy_sum_with(model: &ModelSpec, q: &VariationalState, kind: EntropyKind) -> Result<EntropyDecomposition> {
    if kind == EntropyKind::Entropy && !model.has_constant_base_measure() {
        return Err(Error::Unsupported(format!(
            "{} has a data-dependent base measure; use pseudo-entropies",
            model.family().name()
        )));
    }
    if q.rows.is_empty() {
        return contract("empty variational state");
    }
    let n = q.rows.len() as f64;
    let (mean_q_entropy, prior_entropy, expected_obs_entropy) = match model {
        ModelSpec::Sbn(m) => {
            let rows = discrete_q(model, q, m.num_states()?)?;
            let term1 = rows.iter().map(|p| discrete_entropy_of(p, kind)).sum::<Result<f64>>()? / n;
            let term2 = match kind {
                EntropyKind::Entropy => bernoulli_product_entropy(m.pi())?.value,
                EntropyKind::PseudoEntropy => {
                    pseudo(EfFamily::BernoulliProduct, m.pi().iter().map(|p| (p / (1.0 - p)).ln()).collect())?
                }
            };
            let bar = aggregate_posterior(q)?;
            let mut term3 = 0.0;
            for (s, w) in bar.iter().enumerate() {
                let a = m.activations(&m.state_bits(s))?;
                let h = match kind {
                    EntropyKind::Entropy => a.iter().map(|&v| bernoulli_entropy_from_logit(v)).sum(),
                    EntropyKind::PseudoEntropy => pseudo(EfFamily::BernoulliProduct, a)?,
                };
                term3 += w * h;
            }
            (term1, term2, term3)
        }
        ModelSpec::Mixture(m) => {
            let rows = discrete_q(model, q, m.num_components())?;
            let term1 = rows.iter().map(|p| discrete_entropy_of(p, kind)).sum::<Result<f64>>()? / n;
            let term2 = discrete_entropy_of(m.pi(), kind)?;
            let bar = aggregate_posterior(q)?;
            let mut term3 = 0.0;
            for (c, w) in bar.iter().enumerate() {
                let dist = m.component_distribution(c)?;
                let h = match kind {
                    EntropyKind::Entropy => component_entropy(m, c)?,
                    EntropyKind::PseudoEntropy => pseudo_entropy_generic(&dist)?.value,
                };
                term3 += w * h;
            }
            (term1, term2, term3)
        }
        ModelSpec::LinearGaussian(m) => {
            let rows = gaussian_q(q, m.latent_dim())?;
            let mut term1 = 0.0;
            for (_, cov) in &rows {
                term1 += gaussian_entropy_full(cov)?.value;
            }
            term1 /= n;
            let (term2, term3) = match kind {
                EntropyKind::Entropy => (
                    gaussian_entropy_diagonal(m.prior_var())?.value,
                    gaussian_entropy_diagonal(&m.noise_vars())?.value,
                ),
                EntropyKind::PseudoEntropy => {
                    let prior: Vec<f64> = m.prior_mean().iter().chain(m.prior_var()).cloned().collect();
                    let noise: Vec<f64> = vec![0.0; m.obs_dim()].into_iter().chain(m.noise_vars()).collect();
                    (
                        pseudo_entropy_generic(&EfDistribution::from_standard(EfFamily::GaussianDiagonal, &prior)?)?
                            .value,
                        pseudo_entropy_generic(&EfDistribution::from_standard(EfFamily::GaussianDiagonal, &noise)?)?
                            .value,
                    )
                }
            };
            (term1, term2, term3)
        }
    };
    Ok(EntropyDecomposition {
        mean_q_entropy,
        prior_entropy,
        expected_obs_entropy,
        total: mean_q_entropy - prior_entropy - expected_obs_entropy,
        kind,
    })
}

/// Closed-form entropy of mixture component `c` (constant base measure only).
fn component_entropy(m: &EfMixtureModel, c: usize) -> Result<f64> {
    let theta = &m.components()[c];
    let d = m.obs_dim();
    match m.component_family() {
        crate::models::ComponentFamily::GaussianDiagonal => Ok(gaussian_entropy_diagonal(&theta[d..])?.value),
        crate::models::ComponentFamily::Gamma => {
            let mut total = 0.0;
            for i in 0..d {
                total += gamma_entropy(theta[i], theta[d + i])?.value;
            }
            Ok(total)
        }
        crate::models::ComponentFamily::PoissonProduct => {
            Err(Error::Unsupported("poisson entropy has no closed form".into()))
        }
    }
}

/// Stationary ELBO of p-PCA with standard prior:
/// `−½ log det(WᵀW/σ² + I) − (D/2) log(2πeσ²)`.
pub fn ppca_stationary_elbo(w: &Matrix, sigma2: f64, d: usize, h: usize) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return domain(format!("sigma^2 must be positive, got {sigma2}"));
    }
    if w.rows() != d || w.cols() != h {
        return contract(format!("W is {}x{}, expected {d}x{h}", w.rows(), w.cols()));
    }
    let mut m = w.transpose().matmul(w)?.scale(1.0 / sigma2);
    for i in 0..h {
        m[(i, i)] += 1.0;
    }
    Ok(-0.5 * logdet_psd(&m)? - 0.5 * d as f64 * (2.0 * PI * E * sigma2).ln())
}

/// Recomputes exact posteriors at the fitted parameters and compares the
/// (pseudo-)ELBO with the entropy sum.
pub fn verify_stationary(fit: &FitReport, data: &Dataset, tol: f64) -> Result<VerificationVerdict> {
    let model = &fit.final_params;
    let q = e_step(model, data)?;
    let decomposition = entropy_sum(model, &q)?;
    let objective = match decomposition.kind {
        EntropyKind::Entropy => elbo(model, data, &q)?,
        EntropyKind::PseudoEntropy => pseudo_elbo(model, data, &q)?,
    };
    let abs_gap = (objective - decomposition.total).abs();
    let rel_gap = abs_gap / objective.abs().max(1.0);
    let reason = if !fit.converged {
        Some("non-stationary: the fit did not meet its stationarity thresholds".to_string())
    } else if !(rel_gap <= tol) {
        Some(format!("relative gap {rel_gap:e} exceeds tolerance {tol:e}"))
    } else {
        None
    };
    Ok(VerificationVerdict {
        elbo: objective,
        entropy_sum: decomposition.total,
        decomposition,
        abs_gap,
        rel_gap,
        tolerance: tol,
        stationarity_evidence: fit.stationarity.clone(),
        converged: fit.converged,
        pass: reason.is_none(),
        reason,
    })
}

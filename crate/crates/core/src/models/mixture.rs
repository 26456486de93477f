//! Finite mixtures whose components share one exponential family.

use serde::{Deserialize, Serialize};

use crate::efcore::{natural_params_and_jacobian, EfDistribution, EfFamily};
use crate::error::{contract, domain, Result};
use crate::numerics::{logsumexp, Matrix};

use super::NaturalMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentFamily {
    /// `Θ_c = (μ_1..μ_D, σ²_1..σ²_D)`.
    GaussianDiagonal,
    /// `Θ_c = (α_1..α_D, β_1..β_D)`, shape and rate.
    Gamma,
    /// `Θ_c = (λ_1..λ_D)`.
    PoissonProduct,
}

impl ComponentFamily {
    pub fn ef_family(self) -> EfFamily {
        match self {
            ComponentFamily::GaussianDiagonal => EfFamily::GaussianDiagonal,
            ComponentFamily::Gamma => EfFamily::Gamma,
            ComponentFamily::PoissonProduct => EfFamily::PoissonProduct,
        }
    }

    /// Length of `Θ_c` for observables of dimension `d`.
    pub fn param_len(self, d: usize) -> usize {
        match self {
            ComponentFamily::PoissonProduct => d,
            _ => 2 * d,
        }
    }

    fn obs_dim(self, param_len: usize) -> usize {
        match self {
            ComponentFamily::PoissonProduct => param_len,
            _ => param_len / 2,
        }
    }

    /// `β_c` with `J_c β_c = η(Θ_c)`.
    fn beta(self, theta: &[f64]) -> Vec<f64> {
        let d = self.obs_dim(theta.len());
        match self {
            ComponentFamily::GaussianDiagonal => {
                std::iter::repeat_n(0.0, d).chain(theta[d..].iter().map(|s| -s)).collect()
            }
            ComponentFamily::Gamma => theta[..d].iter().map(|a| a - 1.0).chain(theta[d..].iter().cloned()).collect(),
            ComponentFamily::PoissonProduct => theta.iter().map(|l| l * l.ln()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "MixtureRaw")]
pub struct EfMixtureModel {
    c: usize,
    d: usize,
    pi: Vec<f64>,
    components: Vec<Vec<f64>>,
    component_family: ComponentFamily,
}

#[derive(Serialize, Deserialize)]
struct MixtureRaw {
    #[serde(rename = "C")]
    c: usize,
    pi: Vec<f64>,
    components: Vec<Vec<f64>>,
    component_family: ComponentFamily,
}

impl From<EfMixtureModel> for MixtureRaw {
    fn from(m: EfMixtureModel) -> Self {
        MixtureRaw { c: m.c, pi: m.pi, components: m.components, component_family: m.component_family }
    }
}

impl<'de> Deserialize<'de> for EfMixtureModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = MixtureRaw::deserialize(de)?;
        if raw.c != raw.pi.len() {
            return Err(serde::de::Error::custom(format!("C = {} but pi has {} entries", raw.c, raw.pi.len())));
        }
        EfMixtureModel::new(raw.pi, raw.components, raw.component_family).map_err(serde::de::Error::custom)
    }
}

impl EfMixtureModel {
    pub fn new(pi: Vec<f64>, components: Vec<Vec<f64>>, component_family: ComponentFamily) -> Result<Self> {
        let c = pi.len();
        if c == 0 || components.len() != c {
            return contract(format!("mixture with {} weights and {} components", c, components.len()));
        }
        if pi.iter().any(|&p| !(p > 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return domain("mixture weights must be positive and sum to 1");
        }
        let len = components[0].len();
        let d = component_family.obs_dim(len);
        if d == 0 || component_family.param_len(d) != len || components.iter().any(|t| t.len() != len) {
            return contract("mixture components must share one well-formed parameter length");
        }
        for theta in &components {
            natural_params_and_jacobian(component_family.ef_family(), theta)?;
            if theta.iter().any(|v| !v.is_finite()) {
                return domain("mixture component parameters must be finite");
            }
        }
        Ok(EfMixtureModel { c, d, pi, components, component_family })
    }

    pub fn num_components(&self) -> usize {
        self.c
    }

    pub fn obs_dim(&self) -> usize {
        self.d
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn component_family(&self) -> ComponentFamily {
        self.component_family
    }

    pub fn component_distribution(&self, c: usize) -> Result<EfDistribution> {
        EfDistribution::from_standard(self.component_family.ef_family(), &self.components[c])
    }

    pub fn distributions(&self) -> Result<Vec<EfDistribution>> {
        (0..self.c).map(|c| self.component_distribution(c)).collect()
    }

    /// `log π_c + log p(x | Θ_c)` for every component.
    pub fn log_joint_all(&self, x: &[f64], dists: &[EfDistribution]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return contract(format!("observation of length {}, expected {}", x.len(), self.d));
        }
        dists
            .iter()
            .zip(&self.pi)
            .map(|(dist, p)| Ok(p.ln() + dist.log_density(x)?))
            .collect()
    }

    pub fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        Ok(logsumexp(&self.log_joint_all(x, &self.distributions()?)?))
    }

    /// Free weights `(π_1, …, π_{C−1})`.
    pub fn prior_params(&self) -> Vec<f64> {
        self.pi[..self.c - 1].to_vec()
    }

    pub fn with_prior_params(&self, psi: &[f64]) -> Result<Self> {
        if psi.len() != self.c - 1 {
            return contract(format!("prior vector of length {}, expected {}", psi.len(), self.c - 1));
        }
        let mut pi = psi.to_vec();
        pi.push(1.0 - psi.iter().sum::<f64>());
        EfMixtureModel::new(pi, self.components.clone(), self.component_family)
    }

    /// Categorical log-odds against the last class, with
    /// `α_i = π_i (ζ_i − ρ)` and `ρ = Σ_i π_i ζ_i`.
    pub fn prior_natural_map(&self) -> Result<NaturalMap> {
        let psi = self.prior_params();
        let (zeta, jacobian) = natural_params_and_jacobian(EfFamily::Categorical, &psi)?;
        let rho: f64 = psi.iter().zip(&zeta).map(|(p, z)| p * z).sum();
        let coefficients = psi.iter().zip(&zeta).map(|(p, z)| p * (z - rho)).collect();
        Ok(NaturalMap { natural: zeta, jacobian, coefficients })
    }

    pub fn observable_params(&self) -> Vec<f64> {
        self.components.concat()
    }

    pub fn with_observable_params(&self, theta: &[f64]) -> Result<Self> {
        let len = self.component_family.param_len(self.d);
        if theta.len() != len * self.c {
            return contract(format!("observable vector of length {}, expected {}", theta.len(), len * self.c));
        }
        let components = theta.chunks(len).map(|c| c.to_vec()).collect();
        EfMixtureModel::new(self.pi.clone(), components, self.component_family)
    }

    /// `η(c; Θ) = η(Θ_c)` with a Jacobian that is zero outside block `c`.
    pub fn observable_natural_map(&self, c: usize) -> Result<NaturalMap> {
        if c >= self.c {
            return contract(format!("component {c} out of range for C = {}", self.c));
        }
        let len = self.component_family.param_len(self.d);
        let (natural, block) = natural_params_and_jacobian(self.component_family.ef_family(), &self.components[c])?;
        let mut jacobian = Matrix::zeros(block.rows(), len * self.c);
        for i in 0..block.rows() {
            for j in 0..len {
                jacobian[(i, c * len + j)] = block[(i, j)];
            }
        }
        let coefficients = self.components.iter().flat_map(|t| self.component_family.beta(t)).collect();
        Ok(NaturalMap { natural, jacobian, coefficients })
    }
}

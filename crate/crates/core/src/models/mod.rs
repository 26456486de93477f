//! Generative latent-variable models: sampling, joint and marginal
//! log-densities, exact posteriors and the natural-parameter maps of prior
//! and observable distributions.

mod dataset;
mod linear;
mod mixture;
mod sbn;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::Dataset;
pub use linear::{LinearGaussianModel, Noise};
pub use mixture::{ComponentFamily, EfMixtureModel};
pub use sbn::{SbnModel, DEFAULT_ENUMERATION_CAP};

use crate::error::{contract, domain, Error, Result};
use crate::numerics::{logsumexp, sigmoid, Matrix};

/// Natural parameters, their Jacobian with respect to the chosen parameter
/// subset, and the coefficient vector (`α` or `β`) with `J · coeff = natural`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalMap {
    pub natural: Vec<f64>,
    pub jacobian: Matrix,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Sbn,
    LinearGaussianScalar,
    LinearGaussianDiagonal,
    GaussianMixture,
    GammaMixture,
    PoissonMixture,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 6] = [
        ModelFamily::Sbn,
        ModelFamily::LinearGaussianScalar,
        ModelFamily::LinearGaussianDiagonal,
        ModelFamily::GaussianMixture,
        ModelFamily::GammaMixture,
        ModelFamily::PoissonMixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Sbn => "sbn",
            ModelFamily::LinearGaussianScalar => "linear-gaussian-scalar",
            ModelFamily::LinearGaussianDiagonal => "linear-gaussian-diagonal",
            ModelFamily::GaussianMixture => "gaussian-mixture",
            ModelFamily::GammaMixture => "gamma-mixture",
            ModelFamily::PoissonMixture => "poisson-mixture",
        }
    }
}

/// A latent value: SBN bit-vector, mixture component index, or real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Latent {
    Bits(Vec<u8>),
    Component(usize),
    Real(Vec<f64>),
}

/// Shape of the latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentDomain {
    /// Finitely many states, indexed `0..n`.
    Discrete(usize),
    /// `R^h`.
    Continuous(usize),
}

/// Exact posterior of one data row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Posterior {
    /// Probabilities over the discrete latent states.
    Discrete(Vec<f64>),
    Gaussian { mean: Vec<f64>, cov: Matrix },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    Sbn(SbnModel),
    LinearGaussian(LinearGaussianModel),
    Mixture(EfMixtureModel),
}

impl ModelSpec {
    pub fn family(&self) -> ModelFamily {
        match self {
            ModelSpec::Sbn(_) => ModelFamily::Sbn,
            ModelSpec::LinearGaussian(m) => match m.noise() {
                Noise::Scalar { .. } => ModelFamily::LinearGaussianScalar,
                Noise::Diagonal { .. } => ModelFamily::LinearGaussianDiagonal,
            },
            ModelSpec::Mixture(m) => match m.component_family() {
                ComponentFamily::GaussianDiagonal => ModelFamily::GaussianMixture,
                ComponentFamily::Gamma => ModelFamily::GammaMixture,
                ComponentFamily::PoissonProduct => ModelFamily::PoissonMixture,
            },
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ModelSpec::Sbn(m) => m.obs_dim(),
            ModelSpec::LinearGaussian(m) => m.obs_dim(),
            ModelSpec::Mixture(m) => m.obs_dim(),
        }
    }

    /// False only for families whose observable base measure depends on `x`.
    pub fn has_constant_base_measure(&self) -> bool {
        self.family() != ModelFamily::PoissonMixture
    }

    /// Latent domain; SBN state counts beyond the enumeration cap are a
    /// capacity error.
    pub fn latent_domain(&self) -> Result<LatentDomain> {
        Ok(match self {
            ModelSpec::Sbn(m) => LatentDomain::Discrete(m.num_states()?),
            ModelSpec::LinearGaussian(m) => LatentDomain::Continuous(m.latent_dim()),
            ModelSpec::Mixture(m) => LatentDomain::Discrete(m.num_components()),
        })
    }

    /// Latent value of discrete state `s`.
    pub fn discrete_latent(&self, s: usize) -> Result<Latent> {
        match self {
            ModelSpec::Sbn(m) => {
                if s >= 1usize << m.latent_dim() {
                    return contract(format!("state {s} out of range"));
                }
                Ok(Latent::Bits(m.state_bits(s).iter().map(|&b| b as u8).collect()))
            }
            ModelSpec::Mixture(m) => {
                if s >= m.num_components() {
                    return contract(format!("component {s} out of range"));
                }
                Ok(Latent::Component(s))
            }
            ModelSpec::LinearGaussian(_) => contract("linear-gaussian latents are continuous"),
        }
    }

    /// `log p(z) + log p(x | z)`.
    pub fn log_joint(&self, x: &[f64], z: &Latent) -> Result<f64> {
        match (self, z) {
            (ModelSpec::Sbn(m), Latent::Bits(bits)) => {
                let z = bits_to_f64(bits)?;
                Ok(m.log_prior(&z)? + m.log_likelihood(x, &z)?)
            }
            (ModelSpec::LinearGaussian(m), Latent::Real(z)) => Ok(m.log_prior(z)? + m.log_likelihood(x, z)?),
            (ModelSpec::Mixture(m), Latent::Component(c)) => {
                if *c >= m.num_components() {
                    return contract(format!("component {c} out of range"));
                }
                Ok(m.pi()[*c].ln() + m.component_distribution(*c)?.log_density(x)?)
            }
            _ => contract("latent value does not match the model's latent domain"),
        }
    }

    /// `log p(x)`: enumeration for discrete latents, closed form otherwise.
    pub fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        match self {
            ModelSpec::Sbn(m) => m.log_marginal(x),
            ModelSpec::LinearGaussian(m) => m.log_marginal(x),
            ModelSpec::Mixture(m) => m.log_marginal(x),
        }
    }

    pub fn exact_posterior(&self, x: &[f64]) -> Result<Posterior> {
        match self {
            ModelSpec::LinearGaussian(m) => {
                let cov = m.posterior_cov()?;
                Ok(Posterior::Gaussian { mean: m.posterior_mean(x, &cov)?, cov })
            }
            ModelSpec::Sbn(m) => Ok(Posterior::Discrete(normalize_log(&m.log_joint_all(x, &m.state_table()?)?))),
            ModelSpec::Mixture(m) => {
                Ok(Posterior::Discrete(normalize_log(&m.log_joint_all(x, &m.distributions()?)?)))
            }
        }
    }

    /// Prior parameters `Ψ`; not applicable for a fixed prior.
    pub fn prior_params(&self) -> Result<Vec<f64>> {
        match self {
            ModelSpec::Sbn(m) => Ok(m.pi().to_vec()),
            ModelSpec::LinearGaussian(m) => m.prior_params(),
            ModelSpec::Mixture(m) => Ok(m.prior_params()),
        }
    }

    pub fn with_prior_params(&self, psi: &[f64]) -> Result<ModelSpec> {
        Ok(match self {
            ModelSpec::Sbn(m) => ModelSpec::Sbn(m.with_prior_params(psi)?),
            ModelSpec::LinearGaussian(m) => ModelSpec::LinearGaussian(m.with_prior_params(psi)?),
            ModelSpec::Mixture(m) => ModelSpec::Mixture(m.with_prior_params(psi)?),
        })
    }

    /// Observable parameters `Θ` (excluding the prior).
    pub fn observable_params(&self) -> Vec<f64> {
        match self {
            ModelSpec::Sbn(m) => m.observable_params(),
            ModelSpec::LinearGaussian(m) => m.observable_params(),
            ModelSpec::Mixture(m) => m.observable_params(),
        }
    }

    pub fn with_observable_params(&self, theta: &[f64]) -> Result<ModelSpec> {
        Ok(match self {
            ModelSpec::Sbn(m) => ModelSpec::Sbn(m.with_observable_params(theta)?),
            ModelSpec::LinearGaussian(m) => ModelSpec::LinearGaussian(m.with_observable_params(theta)?),
            ModelSpec::Mixture(m) => ModelSpec::Mixture(m.with_observable_params(theta)?),
        })
    }

    /// Indices into [`observable_params`](Self::observable_params) over
    /// which part B of the parameterization criterion is checked.
    pub fn theta_subset(&self) -> Vec<usize> {
        match self {
            ModelSpec::LinearGaussian(m) => m.theta_subset(),
            _ => (0..self.observable_params().len()).collect(),
        }
    }

    /// Every trainable parameter: prior parameters (when trainable)
    /// followed by observable parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.prior_params().unwrap_or_default();
        p.extend(self.observable_params());
        p
    }

    pub fn num_prior_params(&self) -> usize {
        self.prior_params().map(|p| p.len()).unwrap_or(0)
    }

    pub fn with_params(&self, params: &[f64]) -> Result<ModelSpec> {
        let k = self.num_prior_params();
        let n = k + self.observable_params().len();
        if params.len() != n {
            return contract(format!("parameter vector of length {}, expected {n}", params.len()));
        }
        let base = if k > 0 { self.with_prior_params(&params[..k])? } else { self.clone() };
        base.with_observable_params(&params[k..])
    }

    pub fn prior_natural_map(&self) -> Result<NaturalMap> {
        match self {
            ModelSpec::Sbn(m) => m.prior_natural_map(),
            ModelSpec::LinearGaussian(m) => m.prior_natural_map(),
            ModelSpec::Mixture(m) => m.prior_natural_map(),
        }
    }

    /// Observable natural parameters at `z` with the Jacobian over
    /// [`theta_subset`](Self::theta_subset).
    pub fn observable_natural_map(&self, z: &Latent) -> Result<NaturalMap> {
        match (self, z) {
            (ModelSpec::Sbn(m), Latent::Bits(bits)) => m.observable_natural_map(&bits_to_f64(bits)?),
            (ModelSpec::LinearGaussian(m), Latent::Real(z)) => m.observable_natural_map(z),
            (ModelSpec::Mixture(m), Latent::Component(c)) => m.observable_natural_map(*c),
            _ => contract("latent value does not match the model's latent domain"),
        }
    }

    /// `n` i.i.d. rows. Row `i` draws from its own stream of a ChaCha8
    /// generator seeded with `seed`, so the output does not depend on
    /// thread scheduling.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return contract("sample size must be at least 1");
        }
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample_row(&mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.family(), rows, Some(seed))
    }

    fn sample_row(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            ModelSpec::Sbn(m) => {
                let z: Vec<f64> = m.pi().iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
                Ok(m.activations(&z)?
                    .into_iter()
                    .map(|a| if rng.random::<f64>() < sigmoid(a) { 1.0 } else { 0.0 })
                    .collect())
            }
            ModelSpec::LinearGaussian(m) => {
                let z: Vec<f64> = m
                    .prior_mean()
                    .iter()
                    .zip(m.prior_var())
                    .map(|(mu, v)| mu + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mean = m.mean_of(&z)?;
                Ok(mean
                    .iter()
                    .zip(m.noise_vars())
                    .map(|(mu, v)| mu + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect())
            }
            ModelSpec::Mixture(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut c = m.num_components() - 1;
                for (k, p) in m.pi().iter().enumerate() {
                    acc += p;
                    if u < acc {
                        c = k;
                        break;
                    }
                }
                let theta = &m.components()[c];
                let d = m.obs_dim();
                (0..d)
                    .map(|i| -> Result<f64> {
                        Ok(match m.component_family() {
                            ComponentFamily::GaussianDiagonal => {
                                theta[i] + theta[d + i].sqrt() * rng.sample::<f64, _>(StandardNormal)
                            }
                            ComponentFamily::Gamma => rand_distr::Gamma::new(theta[i], 1.0 / theta[d + i])
                                .map_err(|e| Error::Domain(e.to_string()))?
                                .sample(rng)
                                .max(f64::MIN_POSITIVE),
                            ComponentFamily::PoissonProduct => rand_distr::Poisson::new(theta[i])
                                .map_err(|e| Error::Domain(e.to_string()))?
                                .sample(rng),
                        })
                    })
                    .collect()
            }
        }
    }
}

fn bits_to_f64(bits: &[u8]) -> Result<Vec<f64>> {
    if bits.iter().any(|&b| b > 1) {
        return domain("latent bits must be 0 or 1");
    }
    Ok(bits.iter().map(|&b| b as f64).collect())
}

/// `exp(v − logsumexp v)`.
pub(crate) fn normalize_log(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn gmm(pi: Vec<f64>, comps: Vec<Vec<f64>>) -> ModelSpec {
        ModelSpec::Mixture(EfMixtureModel::new(pi, comps, ComponentFamily::GaussianDiagonal).unwrap())
    }

    #[test]
    fn gmm_sample_mean() {
        let m = gmm(vec![1.0], vec![vec![0.0, 0.0, 1.0, 1.0]]);
        let n = 10_000;
        let data = m.sample(n, 42).unwrap();
        for v in data.mean() {
            assert!(v.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sbn_sample_mean() {
        let m = ModelSpec::Sbn(SbnModel::new(vec![0.5; 2], Matrix::zeros(4, 2), vec![0.0; 4]).unwrap());
        for v in m.sample(10_000, 1).unwrap().mean() {
            assert!((0.45..=0.55).contains(&v));
        }
    }

    #[test]
    fn poisson_sample_mean() {
        let m = ModelSpec::Mixture(EfMixtureModel::new(vec![1.0], vec![vec![3.0]], ComponentFamily::PoissonProduct).unwrap());
        let n = 10_000;
        let mean = m.sample(n, 9).unwrap().mean()[0];
        assert!((mean - 3.0).abs() < 4.0 * (3.0 / n as f64).sqrt());
    }

    #[test]
    fn gamma_and_linear_sample_moments() {
        let n = 20_000;
        let g = ModelSpec::Mixture(EfMixtureModel::new(vec![1.0], vec![vec![3.0, 2.0]], ComponentFamily::Gamma).unwrap());
        let mean = g.sample(n, 3).unwrap().mean()[0];
        // mean α/β = 1.5, variance α/β² = 0.75
        assert!((mean - 1.5).abs() < 4.0 * (0.75 / n as f64).sqrt());

        let w = Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap();
        let lg = ModelSpec::LinearGaussian(LinearGaussianModel::ppca(w, vec![0.5, 1.0], 0.3).unwrap());
        let data = lg.sample(n, 4).unwrap();
        let m = data.mean();
        assert!((m[0] - 0.5).abs() < 4.0 * (1.3 / n as f64).sqrt());
        assert!((m[1] - 1.0).abs() < 4.0 * (4.3 / n as f64).sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = gmm(vec![0.3, 0.7], vec![vec![-1.0, 1.0], vec![2.0, 0.5]]);
        assert_eq!(m.sample(100, 5).unwrap(), m.sample(100, 5).unwrap());
        assert_ne!(m.sample(100, 5).unwrap(), m.sample(100, 6).unwrap());
        // row i is independent of how many rows are drawn
        assert_eq!(m.sample(10, 5).unwrap().rows()[..], m.sample(100, 5).unwrap().rows()[..10]);
    }

    #[test]
    fn identical_components_give_uniform_posterior() {
        let m = gmm(vec![0.25; 4], vec![vec![1.0, 2.0]; 4]);
        match m.exact_posterior(&[0.3]).unwrap() {
            Posterior::Discrete(p) => assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15)),
            _ => panic!("expected responsibilities"),
        }
    }

    #[test]
    fn sbn_posterior_matches_enumeration() {
        let w = Matrix::from_vec(4, 3, vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7, 1.2, -0.4, 0.9, 0.0, 1.5, -2.0]).unwrap();
        let m = ModelSpec::Sbn(SbnModel::new(vec![0.2, 0.6, 0.45], w, vec![0.1, -0.3, 0.0, 0.7]).unwrap());
        let x = [1.0, 0.0, 0.0, 1.0];
        let joint: Vec<f64> = (0..8).map(|s| m.log_joint(&x, &m.discrete_latent(s).unwrap()).unwrap().exp()).collect();
        let total: f64 = joint.iter().sum();
        let Posterior::Discrete(p) = m.exact_posterior(&x).unwrap() else { panic!() };
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&joint) {
            assert!((a - b / total).abs() < 1e-12);
        }
        assert!((m.log_marginal(&x).unwrap() - total.ln()).abs() < 1e-12);
    }

    #[test]
    fn latent_mismatch_is_contract_error() {
        let m = gmm(vec![1.0], vec![vec![0.0, 1.0]]);
        assert!(matches!(m.log_joint(&[0.0], &Latent::Real(vec![0.0])), Err(Error::Contract(_))));
        assert!(matches!(m.log_joint(&[0.0], &Latent::Component(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let w = Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap();
        let specs = vec![
            gmm(vec![0.4, 0.6], vec![vec![0.0, 1.0], vec![1.0, 2.0]]),
            ModelSpec::LinearGaussian(LinearGaussianModel::ppca(w.clone(), vec![0.0, 1.0], 0.3).unwrap()),
            ModelSpec::Sbn(SbnModel::new(vec![0.3], w, vec![0.0, 0.1]).unwrap()),
        ];
        for spec in specs {
            let text = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<ModelSpec>(&text).unwrap(), spec);
        }
        let bad = r#"{"model":"mixture","C":1,"pi":[1.0],"components":[[0.0,-1.0]],"component_family":"gaussian-diagonal"}"#;
        assert!(serde_json::from_str::<ModelSpec>(bad).is_err());
    }

    proptest! {
        #[test]
        fn logsumexp_of_joint_is_marginal(
            seed in 0u64..1000,
            x0 in -3.0f64..3.0,
            x1 in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut comps = Vec::new();
            for _ in 0..3 {
                comps.push(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)]);
            }
            let m = gmm(vec![0.2, 0.3, 0.5], comps);
            let x = [x0, x1];
            let lj: Vec<f64> = (0..3).map(|c| m.log_joint(&x, &Latent::Component(c)).unwrap()).collect();
            // direct density sum
            let mut direct = 0.0;
            let ModelSpec::Mixture(mm) = &m else { unreachable!() };
            for (c, th) in mm.components().iter().enumerate() {
                let mut p = mm.pi()[c];
                for d in 0..2 {
                    let v = th[2 + d];
                    p *= (-(x[d] - th[d]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                direct += p;
            }
            prop_assert!((logsumexp(&lj) - direct.ln()).abs() < 1e-9);
            prop_assert!((m.log_marginal(&x).unwrap() - direct.ln()).abs() < 1e-9);
        }

        #[test]
        fn posterior_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 2..10), shift in -1e3f64..1e3) {
            let p = normalize_log(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = normalize_log(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

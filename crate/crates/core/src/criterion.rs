//! Numerical check of the parameterization criterion.
//!
//! Part A asks for a vector `α(Ψ)` with `ζ(Ψ) = (∂ζ/∂Ψᵀ) α`; part B asks for
//! one `β(Θ)`, shared by every latent value `z`, with
//! `η(z; Θ) = (∂η/∂θᵀ) β` over a chosen subset `θ` of `Θ`. Jacobians are taken
//! by central finite differences and `α`, `β` recovered by least squares.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::models::{
    ComponentFamily, EfMixtureModel, Latent, LatentDomain, LinearGaussianModel, ModelFamily, ModelSpec, Noise,
    SbnModel,
};
use crate::numerics::{inf_norm, jacobian_fd, norm2, solve_spd, sym_eigen, Matrix};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_Z_SAMPLES: usize = 64;
/// Discrete latent spaces up to this size are enumerated in part B.
pub const ENUMERATION_LIMIT: usize = 256;
/// Gram matrices with `λ_min / λ_max` below this are treated as rank deficient.
const RANK_TOL: f64 = 1e-12;
const TIKHONOV: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOptions {
    pub tol: f64,
    pub n_z_samples: usize,
    /// Replaces the model's default `θ` subset for part B.
    pub theta_subset: Option<Vec<usize>>,
}

impl Default for CriterionOptions {
    fn default() -> Self {
        CriterionOptions { tol: DEFAULT_TOLERANCE, n_z_samples: DEFAULT_Z_SAMPLES, theta_subset: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartACertificate {
    pub jacobian: Matrix,
    pub alpha_recovered: Vec<f64>,
    pub alpha_closed_form: Option<Vec<f64>>,
    /// `‖α_rec − α_closed‖∞`, reported only for full column rank.
    pub alpha_discrepancy: Option<f64>,
    /// Largest entrywise gap between the finite-difference and analytic Jacobians.
    pub analytic_jacobian_gap: Option<f64>,
    pub residual_rel: f64,
    pub rank_deficient: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum PartAOutcome {
    Checked(PartACertificate),
    NotApplicable { reason: String },
}

impl PartAOutcome {
    pub fn pass(&self) -> bool {
        match self {
            PartAOutcome::Checked(c) => c.pass,
            PartAOutcome::NotApplicable { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZRecord {
    pub z: Latent,
    pub jacobian: Matrix,
    pub residual_rel: f64,
    pub analytic_jacobian_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartBCertificate {
    pub theta_subset: Vec<usize>,
    pub per_z_records: Vec<ZRecord>,
    pub beta_recovered: Vec<f64>,
    pub beta_closed_form: Option<Vec<f64>>,
    pub beta_discrepancy: Option<f64>,
    /// Joint residual of the stacked system.
    pub residual_rel: f64,
    pub rank_deficient: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub psi: Option<Vec<f64>>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionCertificate {
    pub family: ModelFamily,
    pub draw: usize,
    pub parameter_point: ParameterPoint,
    pub part_a: PartAOutcome,
    pub part_b: PartBCertificate,
    pub tolerance: f64,
    pub constant_base_measure: bool,
    pub note: Option<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub name: String,
    pub family: ModelFamily,
    pub seed: u64,
    pub certificates: Vec<CriterionCertificate>,
    pub pass: bool,
}

struct LeastSquares {
    x: Vec<f64>,
    residual_rel: f64,
    rank_deficient: bool,
}

/// `min ‖A x − b‖₂` through the normal equations; a Tikhonov floor is added
/// only when the Gram matrix is numerically singular.
fn least_squares(a: &Matrix, b: &[f64]) -> Result<LeastSquares> {
    if a.rows() != b.len() {
        return contract(format!("system has {} rows but right-hand side has {}", a.rows(), b.len()));
    }
    let at = a.transpose();
    let mut gram = at.matmul(a)?;
    let rhs = a.tr_matvec(b)?;
    let eig = sym_eigen(&gram)?;
    let lmax = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let lmin = eig.eigenvalues.last().copied().unwrap_or(0.0);
    let rank_deficient = a.cols() == 0 || lmin <= RANK_TOL * lmax.max(f64::MIN_POSITIVE);
    if rank_deficient {
        let floor = TIKHONOV * lmax.max(1.0);
        for i in 0..gram.rows() {
            gram[(i, i)] += floor;
        }
    }
    let x = if a.cols() == 0 { Vec::new() } else { solve_spd(&gram, &rhs)? };
    let ax = a.matvec(&x)?;
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    Ok(LeastSquares { residual_rel: norm2(&r) / norm2(b).max(1.0), x, rank_deficient })
}

fn max_gap(a: &Matrix, b: &Matrix) -> Option<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return None;
    }
    Some(a.entries().iter().zip(b.entries()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn discrepancy(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Part A at `psi`: finite-difference Jacobian of `zeta_map`, least-squares
/// `α`, and comparison against the optional analytic Jacobian and closed form.
pub fn check_part_a<F>(
    zeta_map: F,
    psi: &[f64],
    analytic_jacobian: Option<&Matrix>,
    closed_alpha: Option<&[f64]>,
    tol: f64,
) -> Result<PartACertificate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let zeta = zeta_map(psi)?;
    if zeta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("prior natural parameters are not finite".into()));
    }
    let all: Vec<usize> = (0..psi.len()).collect();
    let jacobian = jacobian_fd(&zeta_map, psi, &all)?;
    let ls = least_squares(&jacobian, &zeta)?;
    let alpha_discrepancy = match closed_alpha {
        Some(a) if !ls.rank_deficient => Some(discrepancy(&ls.x, a)),
        _ => None,
    };
    Ok(PartACertificate {
        analytic_jacobian_gap: analytic_jacobian.and_then(|j| max_gap(&jacobian, j)),
        jacobian,
        alpha_recovered: ls.x,
        alpha_closed_form: closed_alpha.map(<[f64]>::to_vec),
        alpha_discrepancy,
        pass: ls.residual_rel <= tol,
        residual_rel: ls.residual_rel,
        rank_deficient: ls.rank_deficient,
    })
}

/// Part B: stacks `J(z) β = η(z)` over all `z_samples` and solves for a single
/// `β`. `analytic_jacobians`, when given, holds one matrix per sample.
pub fn check_part_b<F>(
    eta_map: F,
    theta: &[f64],
    theta_subset: &[usize],
    z_samples: &[Latent],
    analytic_jacobians: Option<&[Matrix]>,
    closed_beta: Option<&[f64]>,
    tol: f64,
) -> Result<PartBCertificate>
where
    F: Fn(&Latent, &[f64]) -> Result<Vec<f64>>,
{
    if z_samples.is_empty() {
        return contract("part B needs at least one latent sample");
    }
    if theta_subset.is_empty() || theta_subset.iter().any(|&i| i >= theta.len()) {
        return contract("theta subset is empty or out of range");
    }
    let mut blocks = Vec::with_capacity(z_samples.len());
    for z in z_samples {
        let eta = eta_map(z, theta)?;
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("observable natural parameters are not finite".into()));
        }
        let jac = jacobian_fd(|t: &[f64]| eta_map(z, t), theta, theta_subset)?;
        blocks.push((eta, jac));
    }
    let mut stacked = blocks[0].1.clone();
    for (_, j) in &blocks[1..] {
        stacked = stacked.vstack(j)?;
    }
    let rhs: Vec<f64> = blocks.iter().flat_map(|(e, _)| e.iter().cloned()).collect();
    let ls = least_squares(&stacked, &rhs)?;
    let per_z_records = blocks
        .into_iter()
        .zip(z_samples)
        .enumerate()
        .map(|(k, ((eta, jacobian), z))| {
            let fitted = jacobian.matvec(&ls.x)?;
            let r: Vec<f64> = fitted.iter().zip(&eta).map(|(a, b)| a - b).collect();
            Ok(ZRecord {
                z: z.clone(),
                residual_rel: norm2(&r) / norm2(&eta).max(1.0),
                analytic_jacobian_gap: analytic_jacobians.and_then(|js| js.get(k)).and_then(|j| max_gap(&jacobian, j)),
                jacobian,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let beta_discrepancy = match closed_beta {
        Some(b) if !ls.rank_deficient => Some(discrepancy(&ls.x, b)),
        _ => None,
    };
    Ok(PartBCertificate {
        theta_subset: theta_subset.to_vec(),
        per_z_records,
        beta_recovered: ls.x,
        beta_closed_form: closed_beta.map(<[f64]>::to_vec),
        beta_discrepancy,
        pass: ls.residual_rel <= tol,
        residual_rel: ls.residual_rel,
        rank_deficient: ls.rank_deficient,
    })
}

/// Latent values for part B: every state of a small discrete space,
/// otherwise `n` random draws.
pub fn latent_samples(model: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Latent>> {
    match model.latent_domain()? {
        LatentDomain::Discrete(k) if k <= ENUMERATION_LIMIT => (0..k).map(|s| model.discrete_latent(s)).collect(),
        LatentDomain::Discrete(k) => (0..n).map(|_| model.discrete_latent(rng.random_range(0..k))).collect(),
        LatentDomain::Continuous(h) => {
            Ok((0..n).map(|_| Latent::Real((0..h).map(|_| rng.sample(StandardNormal)).collect())).collect())
        }
    }
}

/// Certificate for the model at its current parameters.
pub fn certify_point(model: &ModelSpec, draw: usize, rng: &mut ChaCha8Rng, opts: &CriterionOptions) -> Result<CriterionCertificate> {
    let part_a = match model.prior_natural_map() {
        Ok(map) => {
            let psi = model.prior_params()?;
            let zeta = |p: &[f64]| -> Result<Vec<f64>> { Ok(model.with_prior_params(p)?.prior_natural_map()?.natural) };
            PartAOutcome::Checked(check_part_a(zeta, &psi, Some(&map.jacobian), Some(&map.coefficients), opts.tol)?)
        }
        Err(Error::NotApplicable(reason)) => PartAOutcome::NotApplicable { reason },
        Err(e) => return Err(e),
    };

    let theta = model.observable_params();
    let default_subset = model.theta_subset();
    let subset = opts.theta_subset.clone().unwrap_or_else(|| default_subset.clone());
    let zs = latent_samples(model, opts.n_z_samples, rng)?;
    let (analytic, closed) = if subset == default_subset {
        let maps = zs.iter().map(|z| model.observable_natural_map(z)).collect::<Result<Vec<_>>>()?;
        let closed = maps[0].coefficients.clone();
        (Some(maps.into_iter().map(|m| m.jacobian).collect::<Vec<_>>()), Some(closed))
    } else {
        (None, None)
    };
    let eta = |z: &Latent, t: &[f64]| -> Result<Vec<f64>> {
        Ok(model.with_observable_params(t)?.observable_natural_map(z)?.natural)
    };
    let part_b = check_part_b(eta, &theta, &subset, &zs, analytic.as_deref(), closed.as_deref(), opts.tol)?;

    let constant_base_measure = model.has_constant_base_measure();
    let note = (!constant_base_measure)
        .then(|| "non-constant base measure: the equality holds for the pseudo-ELBO and pseudo-entropies".to_string());
    Ok(CriterionCertificate {
        family: model.family(),
        draw,
        parameter_point: ParameterPoint { psi: model.prior_params().ok(), theta },
        pass: part_a.pass() && part_b.pass,
        part_a,
        part_b,
        tolerance: opts.tol,
        constant_base_measure,
        note,
    })
}

/// Certifies `n_draws` random parameter points with the shapes of
/// `template`. Draw `k` uses stream `k` of a ChaCha8 generator seeded with
/// `seed`, so results do not depend on scheduling.
pub fn certify_model(
    name: &str,
    template: &ModelSpec,
    n_draws: usize,
    seed: u64,
    opts: &CriterionOptions,
) -> Result<CertificationReport> {
    if n_draws == 0 {
        return contract("at least one parameter draw is required");
    }
    let certificates = (0..n_draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let model = random_parameters(template, &mut rng)?;
            certify_point(&model, k, &mut rng, opts).map_err(|e| annotate(e, k, &model))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CertificationReport {
        name: name.to_string(),
        family: template.family(),
        seed,
        pass: certificates.iter().all(|c| c.pass),
        certificates,
    })
}

fn annotate(err: Error, draw: usize, model: &ModelSpec) -> Error {
    let point = serde_json::to_string(&model.params()).unwrap_or_default();
    Error::Numerical(format!("draw {draw} at parameters {point}: {err}"))
}

fn log_uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-2.0f64..2.0).exp()
}

fn clamped_probability(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(1e-3..1.0 - 1e-3)
}

/// Flat Dirichlet clamped to `[1e-3, 1 − 1e-3]` and renormalized.
fn dirichlet(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    let clamped: Vec<f64> = raw.iter().map(|r| (r / s).clamp(1e-3, 1.0 - 1e-3)).collect();
    let s: f64 = clamped.iter().sum();
    let mut pi: Vec<f64> = clamped.iter().map(|p| p / s).collect();
    let head: f64 = pi[..c - 1].iter().sum();
    pi[c - 1] = 1.0 - head;
    pi
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random parameters with the shapes of `template`: probabilities from a
/// clamped flat Dirichlet, positive parameters log-uniform on `[e⁻², e²]`,
/// everything else standard normal.
pub fn random_parameters(template: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<ModelSpec> {
    Ok(match template {
        ModelSpec::Sbn(m) => {
            let (d, h) = (m.obs_dim(), m.latent_dim());
            let pi = (0..h).map(|_| clamped_probability(rng)).collect();
            let w = Matrix::from_vec(d, h, (0..d * h).map(|_| normal(rng)).collect())?;
            let mu = (0..d).map(|_| normal(rng)).collect();
            ModelSpec::Sbn(SbnModel::new(pi, w, mu)?.with_enumeration_cap(m.enumeration_cap())?)
        }
        ModelSpec::LinearGaussian(m) => {
            let (d, h) = (m.obs_dim(), m.latent_dim());
            let (m0, v0) = if m.parameterized_prior() {
                ((0..h).map(|_| normal(rng)).collect(), (0..h).map(|_| log_uniform(rng)).collect())
            } else {
                (m.prior_mean().to_vec(), m.prior_var().to_vec())
            };
            let w = Matrix::from_vec(d, h, (0..d * h).map(|_| normal(rng)).collect())?;
            let mu = (0..d).map(|_| normal(rng)).collect();
            let noise = match m.noise() {
                Noise::Scalar { .. } => Noise::Scalar { sigma2: log_uniform(rng) },
                Noise::Diagonal { .. } => Noise::Diagonal { sigma2: (0..d).map(|_| log_uniform(rng)).collect() },
            };
            ModelSpec::LinearGaussian(LinearGaussianModel::new(m0, v0, m.parameterized_prior(), w, mu, noise)?)
        }
        ModelSpec::Mixture(m) => {
            let (c, d) = (m.num_components(), m.obs_dim());
            let pi = dirichlet(rng, c);
            let family = m.component_family();
            let components = (0..c)
                .map(|_| match family {
                    ComponentFamily::GaussianDiagonal => {
                        let mut t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                        t.extend((0..d).map(|_| log_uniform(rng)));
                        t
                    }
                    _ => (0..family.param_len(d)).map(|_| log_uniform(rng)).collect(),
                })
                .collect();
            ModelSpec::Mixture(EfMixtureModel::new(pi, components, family)?)
        }
    })
}

/// One template per model instance covered by the criterion: SBN, p-PCA
/// with fixed and with trainable prior, factor analysis, and Gaussian, Gamma
/// and Poisson mixtures.
pub fn standard_templates() -> Vec<(&'static str, ModelSpec)> {
    let lg = |parameterized: bool, noise: Noise| {
        let (d, h) = (5, 2);
        ModelSpec::LinearGaussian(
            LinearGaussianModel::new(vec![0.0; h], vec![1.0; h], parameterized, Matrix::zeros(d, h), vec![0.0; d], noise)
                .expect("valid template"),
        )
    };
    let mix = |c: usize, d: usize, family: ComponentFamily| {
        let theta = vec![1.0; family.param_len(d)];
        ModelSpec::Mixture(EfMixtureModel::new(vec![1.0 / c as f64; c], vec![theta; c], family).expect("valid template"))
    };
    vec![
        ("sbn", ModelSpec::Sbn(SbnModel::new(vec![0.5; 3], Matrix::zeros(8, 3), vec![0.0; 8]).expect("valid template"))),
        ("ppca-standard", lg(false, Noise::Scalar { sigma2: 1.0 })),
        ("linear-gaussian-scalar", lg(true, Noise::Scalar { sigma2: 1.0 })),
        ("factor-analysis", lg(true, Noise::Diagonal { sigma2: vec![1.0; 5] })),
        ("gaussian-mixture", mix(3, 2, ComponentFamily::GaussianDiagonal)),
        ("gamma-mixture", mix(2, 1, ComponentFamily::Gamma)),
        ("poisson-mixture", mix(3, 4, ComponentFamily::PoissonProduct)),
    ]
}

/// `ζ(Ψ) = PΨ + c` on `R²` with `P` the projector onto the first axis and
/// `c = (0, 1)`: `c` lies outside the range of `J = P`, so part A fails.
pub fn broken_prior_map(psi: &[f64]) -> Result<Vec<f64>> {
    if psi.len() != 2 {
        return contract("the broken prior map acts on R^2");
    }
    Ok(vec![psi[0], 1.0])
}

/// `η(z; θ) = θ + z`: `J = I` for every `z`, so `β` would have to equal
/// `θ + z` and cannot be shared across latent values.
pub fn broken_observable_map(z: &Latent, theta: &[f64]) -> Result<Vec<f64>> {
    match z {
        Latent::Real(v) if v.len() == theta.len() => Ok(theta.iter().zip(v).map(|(t, z)| t + z).collect()),
        _ => contract("the broken observable map needs a real latent of the parameter length"),
    }
}

/// Runs both broken maps and returns their (part A, part B) certificates.
pub fn counterexamples(tol: f64) -> Result<(PartACertificate, PartBCertificate)> {
    let a = check_part_a(broken_prior_map, &[0.7, -0.3], None, None, tol)?;
    let zs = [Latent::Real(vec![0.0, 0.0]), Latent::Real(vec![1.0, -0.5]), Latent::Real(vec![-2.0, 0.25])];
    let b = check_part_b(broken_observable_map, &[0.4, 1.3], &[0, 1], &zs, None, None, tol)?;
    Ok((a, b))
}

/// Largest residual over a report, for summaries.
pub fn worst_residual(report: &CertificationReport) -> f64 {
    let values: Vec<f64> = report
        .certificates
        .iter()
        .flat_map(|c| {
            let a = match &c.part_a {
                PartAOutcome::Checked(a) => a.residual_rel,
                PartAOutcome::NotApplicable { .. } => 0.0,
            };
            [a, c.part_b.residual_rel]
        })
        .collect();
    inf_norm(&values)
}

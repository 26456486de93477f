//! Exact-posterior EM, the closed-form p-PCA fit, and initialization.

mod linear;
mod mixture;
mod sbn;

pub use linear::{fit_ppca_closed_form, PpcaFit};
pub use mixture::{solve_gamma_shape, MIN_COMPONENT_MASS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{elbo, entropy_sum, mean_log_base_measure};
use crate::error::{contract, Error, Result};
use crate::models::{
    normalize_log, Dataset, EfMixtureModel, LinearGaussianModel, ModelSpec, Noise, Posterior, SbnModel,
};
use crate::numerics::{inf_norm, norm2, sym_eigen, Matrix};

use linear::Moments;

/// One variational distribution per data row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub rows: Vec<Posterior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once `|F_t − F_{t−1}|` is at most this ...
    pub tol_elbo: f64,
    /// ... and the gradient ∞-norm is at most this.
    pub tol_grad: f64,
    /// Squared-extrapolation acceleration of EM; each update is still
    /// monotone in the ELBO.
    #[serde(default = "default_accelerate")]
    pub accelerate: bool,
}

fn default_accelerate() -> bool {
    true
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iters: 2000, tol_elbo: 1e-10, tol_grad: 1e-8, accelerate: true }
    }
}

/// Evidence that the returned parameters are (or are not) stationary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    /// Last ELBO change; absent for closed-form fits.
    pub elbo_delta: Option<f64>,
    /// ∞-norm of the ELBO gradient at the final parameters with exact posteriors.
    pub grad_inf_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Em,
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: FitMethod,
    pub elbo_trajectory: Vec<f64>,
    pub entropy_sum_trajectory: Vec<f64>,
    /// `(1/N) Σ log h(x_n)`; subtract from the ELBO to get the pseudo-ELBO,
    /// which is what a pseudo entropy sum is compared against.
    pub log_base_shift: f64,
    pub final_params: ModelSpec,
    pub stationarity: Stationarity,
    /// Number of parameter updates; one per trajectory entry after the first.
    pub iterations: usize,
    /// M-steps taken, including those inside accelerated updates.
    pub m_steps: usize,
    pub converged: bool,
    pub options: FitOptions,
    pub notes: Vec<String>,
}

impl FitReport {
    /// CSV with columns `iteration,elbo,pseudo_elbo,entropy_sum`. The
    /// entropy sum is of pseudo kind when the base measure is not constant.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iteration,elbo,pseudo_elbo,entropy_sum\n");
        for (t, (f, s)) in self.elbo_trajectory.iter().zip(&self.entropy_sum_trajectory).enumerate() {
            out.push_str(&format!("{t},{f:.16e},{:.16e},{s:.16e}\n", f - self.log_base_shift));
        }
        out
    }
}

fn check_data(model: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.family() != model.family() {
        return contract(format!(
            "data generated for {} but model is {}",
            data.family().name(),
            model.family().name()
        ));
    }
    if data.dim() != model.obs_dim() {
        return contract(format!("data dimension {} but model expects {}", data.dim(), model.obs_dim()));
    }
    Ok(())
}

/// Exact posterior of every row. Per-model tables are built once and rows
/// are processed in parallel with order preserved.
pub fn e_step(model: &ModelSpec, data: &Dataset) -> Result<VariationalState> {
    if data.dim() != model.obs_dim() {
        return contract(format!("data dimension {} but model expects {}", data.dim(), model.obs_dim()));
    }
    let rows = match model {
        ModelSpec::Sbn(m) => {
            let table = m.state_table()?;
            data.rows()
                .par_iter()
                .map(|x| Ok(Posterior::Discrete(normalize_log(&m.log_joint_all(x, &table)?))))
                .collect::<Result<Vec<_>>>()?
        }
        ModelSpec::Mixture(m) => {
            let dists = m.distributions()?;
            data.rows()
                .par_iter()
                .map(|x| Ok(Posterior::Discrete(normalize_log(&m.log_joint_all(x, &dists)?))))
                .collect::<Result<Vec<_>>>()?
        }
        ModelSpec::LinearGaussian(m) => {
            let cov = m.posterior_cov()?;
            data.rows()
                .par_iter()
                .map(|x| Ok(Posterior::Gaussian { mean: m.posterior_mean(x, &cov)?, cov: cov.clone() }))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(VariationalState { rows })
}

fn discrete_rows(q: &VariationalState) -> Result<Vec<Vec<f64>>> {
    q.rows
        .iter()
        .map(|r| match r {
            Posterior::Discrete(p) => Ok(p.clone()),
            Posterior::Gaussian { .. } => contract("expected discrete posteriors"),
        })
        .collect()
}

fn moments(q: &VariationalState) -> Result<Vec<Moments<'_>>> {
    q.rows
        .iter()
        .map(|r| match r {
            Posterior::Gaussian { mean, cov } => Ok(Moments { mean, cov }),
            Posterior::Discrete(_) => contract("expected Gaussian posteriors"),
        })
        .collect()
}

fn check_q(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<()> {
    if q.rows.len() != data.len() {
        return contract(format!("{} variational rows for {} data rows", q.rows.len(), data.len()));
    }
    if data.dim() != model.obs_dim() {
        return contract(format!("data dimension {} but model expects {}", data.dim(), model.obs_dim()));
    }
    Ok(())
}

/// Parameters maximizing the ELBO for fixed `q`. For the SBN the
/// observable part is a concave maximization solved iteratively.
pub fn m_step(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<ModelSpec> {
    check_q(model, data, q)?;
    Ok(match model {
        ModelSpec::Sbn(m) => ModelSpec::Sbn(sbn::m_step(m, data.rows(), &discrete_rows(q)?)?),
        ModelSpec::Mixture(m) => ModelSpec::Mixture(mixture::m_step(m, data.rows(), &discrete_rows(q)?)?),
        ModelSpec::LinearGaussian(m) => ModelSpec::LinearGaussian(linear::m_step(m, data.rows(), &moments(q)?)?),
    })
}

/// Gradient of the ELBO with respect to [`ModelSpec::params`] at fixed `q`.
pub fn gradient_elbo(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<Vec<f64>> {
    check_q(model, data, q)?;
    match model {
        ModelSpec::Sbn(m) => sbn::gradient(m, data.rows(), &discrete_rows(q)?),
        ModelSpec::Mixture(m) => mixture::gradient(m, data.rows(), &discrete_rows(q)?),
        ModelSpec::LinearGaussian(m) => linear::gradient(m, data.rows(), &moments(q)?),
    }
}

/// EM from `init` until both stationarity thresholds hold or `max_iters`
/// M-steps have been taken.
pub fn fit_em(init: &ModelSpec, data: &Dataset, opts: &FitOptions) -> Result<FitReport> {
    check_data(init, data)?;
    let log_base_shift = mean_log_base_measure(init, data)?;
    let mut model = init.clone();
    let mut q = e_step(&model, data)?;
    let mut f = elbo(&model, data, &q)?;
    let mut elbo_trajectory = vec![f];
    let mut entropy_sum_trajectory = vec![entropy_sum(&model, &q)?.total];
    let mut grad = inf_norm(&gradient_elbo(&model, data, &q)?);
    let mut delta = None;
    let mut notes = Vec::new();
    let mut iterations = 0;
    let mut m_steps = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        let (next, next_q, f_new, used) =
            if opts.accelerate { squarem_step(&model, data, &q, f)? } else { em_step(&model, data, &q)? };
        model = next;
        q = next_q;
        iterations += 1;
        m_steps += used;
        let d = f_new - f;
        if d < -1e-12 * f.abs().max(1.0) {
            notes.push(format!("ELBO decreased by {:e} at iteration {iterations}", -d));
        }
        f = f_new;
        delta = Some(d);
        elbo_trajectory.push(f);
        entropy_sum_trajectory.push(entropy_sum(&model, &q)?.total);
        grad = inf_norm(&gradient_elbo(&model, data, &q)?);
        if d.abs() <= opts.tol_elbo && grad <= opts.tol_grad {
            converged = true;
            break;
        }
    }
    if !converged {
        notes.push(format!("stopped after {iterations} iterations without meeting the stationarity thresholds"));
    }
    Ok(FitReport {
        method: FitMethod::Em,
        elbo_trajectory,
        entropy_sum_trajectory,
        log_base_shift,
        final_params: model,
        stationarity: Stationarity { elbo_delta: delta, grad_inf_norm: grad },
        iterations,
        m_steps,
        converged,
        options: *opts,
        notes,
    })
}

type Step = (ModelSpec, VariationalState, f64, usize);

fn em_step(model: &ModelSpec, data: &Dataset, q: &VariationalState) -> Result<Step> {
    let next = m_step(model, data, q)?;
    let q = e_step(&next, data)?;
    let f = elbo(&next, data, &q)?;
    Ok((next, q, f, 1))
}

/// Two EM steps followed by a squared extrapolation in parameter space and
/// one stabilizing EM step. Falls back to the plain double step when the
/// extrapolated point leaves the parameter domain, fails its M-step, or
/// scores lower, so the ELBO never decreases.
fn squarem_step(model: &ModelSpec, data: &Dataset, q: &VariationalState, f0: f64) -> Result<Step> {
    let (m1, q1, f1, _) = em_step(model, data, q)?;
    let (m2, q2, f2, _) = em_step(&m1, data, &q1)?;
    let plain = (m2, q2, f2, 2);
    // an EM step that did not improve means we are already at the noise floor
    if f1 <= f0 {
        return Ok(plain);
    }
    let p0 = model.params();
    let p1 = m1.params();
    let p2 = plain.0.params();
    let r: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = p2.iter().zip(&p1).zip(&r).map(|((a, b), r)| a - b - r).collect();
    let (nr, nv) = (norm2(&r), norm2(&v));
    if !(nv > 0.0) {
        return Ok(plain);
    }
    let alpha = (-nr / nv).min(-1.0);
    if alpha == -1.0 {
        return Ok(plain);
    }
    let jump: Vec<f64> = p0.iter().zip(&r).zip(&v).map(|((p, r), v)| p - 2.0 * alpha * r + alpha * alpha * v).collect();
    let candidate = (|| -> Result<Step> {
        let m = model.with_params(&jump)?;
        let qm = e_step(&m, data)?;
        let (m, qm, fm, _) = em_step(&m, data, &qm)?;
        Ok((m, qm, fm, 3))
    })();
    match candidate {
        Ok(c) if c.2.is_finite() && c.2 >= plain.2 => Ok(c),
        _ => Ok(plain),
    }
}

/// Closed-form p-PCA fit with `h` latent dimensions, reported in the same
/// shape as an EM fit.
pub fn fit_ppca_report(data: &Dataset, h: usize, opts: &FitOptions) -> Result<FitReport> {
    let fit = fit_ppca_closed_form(data.rows(), h)?;
    let model = ModelSpec::LinearGaussian(fit.model);
    check_data(&model, data)?;
    let q = e_step(&model, data)?;
    let f = elbo(&model, data, &q)?;
    let grad = inf_norm(&gradient_elbo(&model, data, &q)?);
    let mut notes = Vec::new();
    if !fit.clamped_columns.is_empty() {
        notes.push(format!("columns {:?} clamped to zero: eigenvalue not above sigma^2", fit.clamped_columns));
    }
    let converged = grad <= opts.tol_grad;
    if !converged {
        notes.push(format!("gradient norm {grad:e} above tolerance {:e}", opts.tol_grad));
    }
    Ok(FitReport {
        method: FitMethod::ClosedForm,
        elbo_trajectory: vec![f],
        entropy_sum_trajectory: vec![entropy_sum(&model, &q)?.total],
        log_base_shift: 0.0,
        final_params: model,
        stationarity: Stationarity { elbo_delta: None, grad_inf_norm: grad },
        iterations: 0,
        m_steps: 0,
        converged,
        options: *opts,
        notes,
    })
}

/// Starting parameters for EM with the structure of `template` (sizes,
/// family, noise kind, prior mode). Deterministic in `seed`.
pub fn initialize(template: &ModelSpec, data: &Dataset, seed: u64) -> Result<ModelSpec> {
    check_data(template, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match template {
        ModelSpec::Mixture(m) => init_mixture(m, data, &mut rng).map(ModelSpec::Mixture),
        ModelSpec::Sbn(m) => init_sbn(m, data, &mut rng).map(ModelSpec::Sbn),
        ModelSpec::LinearGaussian(m) => init_linear(m, data).map(ModelSpec::LinearGaussian),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding, then one M-step from softened hard assignments.
fn init_mixture(m: &EfMixtureModel, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<EfMixtureModel> {
    let c_count = m.num_components();
    let rows = data.rows();
    if rows.len() < c_count {
        return contract(format!("{} rows cannot seed {c_count} components", rows.len()));
    }
    let mut centers = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut dist: Vec<f64> = rows.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < c_count {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = rows.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..rows.len())
        };
        centers.push(rows[pick].clone());
        for (d, x) in dist.iter_mut().zip(rows) {
            *d = d.min(sq_dist(x, &centers[centers.len() - 1]));
        }
    }
    let soft = if c_count == 1 { 0.0 } else { 0.1 / c_count as f64 };
    let resp: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            let best = (0..c_count)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .unwrap_or(0);
            (0..c_count).map(|c| if c == best { 1.0 - soft * (c_count - 1) as f64 } else { soft }).collect()
        })
        .collect();
    mixture::m_step(m, rows, &resp)
}

fn init_sbn(m: &SbnModel, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<SbnModel> {
    let (h, d) = (m.latent_dim(), m.obs_dim());
    let w = Matrix::from_vec(d, h, (0..d * h).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())?;
    let mu = data
        .mean()
        .into_iter()
        .map(|p| {
            let p = p.clamp(0.01, 0.99);
            (p / (1.0 - p)).ln()
        })
        .collect();
    SbnModel::new(vec![0.5; h], w, mu)?.with_enumeration_cap(m.enumeration_cap())
}

/// Principal subspace from the closed-form p-PCA fit. Diagonal noise takes
/// the unexplained part of each sample variance, floored at 0.1% of it.
fn init_linear(m: &LinearGaussianModel, data: &Dataset) -> Result<LinearGaussianModel> {
    let (h, d) = (m.latent_dim(), m.obs_dim());
    let fit = fit_ppca_closed_form(data.rows(), h)?;
    let w = fit.model.w().clone();
    let mu = fit.model.mu().to_vec();
    let noise = match m.noise() {
        Noise::Scalar { .. } => fit.model.noise().clone(),
        Noise::Diagonal { .. } => {
            let n = data.len() as f64;
            let mut sigma2 = Vec::with_capacity(d);
            for i in 0..d {
                let s: f64 = data.rows().iter().map(|x| (x[i] - mu[i]).powi(2)).sum::<f64>() / n;
                let explained: f64 = w.row(i).iter().map(|v| v * v).sum();
                sigma2.push((s - explained).max(1e-3 * s));
            }
            Noise::Diagonal { sigma2 }
        }
    };
    LinearGaussianModel::new(vec![0.0; h], vec![1.0; h], m.parameterized_prior(), w, mu, noise)
}

/// Eigenvalues of the `1/N` sample covariance, descending.
pub fn sample_covariance_eigenvalues(data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let d = data.dim();
    let n = data.len() as f64;
    let mean = data.mean();
    let mut cov = Matrix::zeros(d, d);
    for x in data.rows() {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
            }
        }
    }
    Ok(sym_eigen(&cov)?.eigenvalues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::pseudo_elbo;
    use crate::models::ComponentFamily;
    use crate::numerics::gradient_fd;

    fn gmm() -> ModelSpec {
        ModelSpec::Mixture(
            EfMixtureModel::new(
                vec![0.3, 0.5, 0.2],
                vec![vec![-3.0, 0.0, 0.5, 1.0], vec![0.0, 3.0, 1.0, 0.4], vec![3.0, -2.0, 0.7, 0.7]],
                ComponentFamily::GaussianDiagonal,
            )
            .unwrap(),
        )
    }

    fn sbn() -> ModelSpec {
        let w = Matrix::from_vec(4, 2, vec![2.0, -1.0, 0.5, 1.5, -2.0, 0.0, 1.0, 1.0]).unwrap();
        ModelSpec::Sbn(SbnModel::new(vec![0.3, 0.6], w, vec![-0.5, 0.2, 0.0, -1.0]).unwrap())
    }

    fn fa() -> ModelSpec {
        let w = Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.5, 1.0, -0.7, 0.3, 0.2, -1.2]).unwrap();
        ModelSpec::LinearGaussian(
            LinearGaussianModel::new(
                vec![0.3, -0.2],
                vec![1.4, 0.6],
                true,
                w,
                vec![0.5, 0.0, -1.0, 2.0],
                Noise::Diagonal { sigma2: vec![0.2, 0.5, 0.3, 0.8] },
            )
            .unwrap(),
        )
    }

    fn poisson() -> ModelSpec {
        ModelSpec::Mixture(
            EfMixtureModel::new(
                vec![0.5, 0.5],
                vec![vec![1.0, 6.0], vec![5.0, 0.5]],
                ComponentFamily::PoissonProduct,
            )
            .unwrap(),
        )
    }

    fn gamma() -> ModelSpec {
        ModelSpec::Mixture(
            EfMixtureModel::new(vec![0.4, 0.6], vec![vec![2.0, 4.0], vec![9.0, 1.5]], ComponentFamily::Gamma).unwrap(),
        )
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (truth, k) in [gmm(), sbn(), fa(), poisson(), gamma()].into_iter().flat_map(|t| (0..4).map(move |k| (t.clone(), k))) {
            let data = truth.sample(40, 11 + k).unwrap();
            // perturb multiplicatively so the point is not stationary and stays in the domain
            let p0: Vec<f64> = truth.params().iter().map(|v| v * rng.random_range(0.9..1.1) + 0.01).collect();
            let model = truth.with_params(&p0).unwrap();
            let q = e_step(&truth, &data).unwrap();
            let analytic = gradient_elbo(&model, &data, &q).unwrap();
            let numeric =
                gradient_fd(|p| elbo(&model.with_params(p)?, &data, &q), &p0).unwrap();
            for (a, b) in analytic.iter().zip(&numeric) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{:?}: {a} vs {b}", truth.family());
            }
        }
    }

    #[test]
    fn em_is_monotone_and_converges() {
        for (truth, n) in [(gmm(), 300), (sbn(), 300), (fa(), 400), (poisson(), 300), (gamma(), 300)] {
            let data = truth.sample(n, 5).unwrap();
            let init = initialize(&truth, &data, 1).unwrap();
            let plain = fit_em(&init, &data, &FitOptions { max_iters: 50, accelerate: false, ..FitOptions::default() }).unwrap();
            for pair in plain.elbo_trajectory.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-10 * pair[0].abs().max(1.0), "{:?}", truth.family());
            }
            assert_eq!(plain.m_steps, plain.iterations);
            let fit = fit_em(&init, &data, &FitOptions::default()).unwrap();
            for pair in fit.elbo_trajectory.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-10 * pair[0].abs().max(1.0), "{:?}", truth.family());
            }
            assert!(fit.converged, "{:?}: {:?}", truth.family(), fit.stationarity);
            assert_eq!(fit.elbo_trajectory.len(), fit.iterations + 1);
        }
    }

    #[test]
    fn single_component_em_is_the_mle() {
        let truth = ModelSpec::Mixture(
            EfMixtureModel::new(vec![1.0], vec![vec![1.5, -2.0, 0.3, 2.0]], ComponentFamily::GaussianDiagonal).unwrap(),
        );
        let data = truth.sample(200, 3).unwrap();
        let init = initialize(&truth, &data, 0).unwrap();
        let fit = fit_em(&init, &data, &FitOptions::default()).unwrap();
        let mean = data.mean();
        let ModelSpec::Mixture(m) = &fit.final_params else { panic!() };
        let theta = &m.components()[0];
        for i in 0..2 {
            let var: f64 = data.rows().iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / 200.0;
            assert!((theta[i] - mean[i]).abs() < 1e-12);
            assert!((theta[2 + i] - var).abs() < 1e-12);
        }
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn poisson_single_component_is_column_mean() {
        let truth = ModelSpec::Mixture(
            EfMixtureModel::new(vec![1.0], vec![vec![0.7, 4.0, 12.0]], ComponentFamily::PoissonProduct).unwrap(),
        );
        let data = truth.sample(300, 8).unwrap();
        let fit = fit_em(&initialize(&truth, &data, 0).unwrap(), &data, &FitOptions::default()).unwrap();
        let ModelSpec::Mixture(m) = &fit.final_params else { panic!() };
        for (l, mean) in m.components()[0].iter().zip(data.mean()) {
            assert!((l - mean).abs() < 1e-12 * mean);
        }
        assert!(fit.stationarity.grad_inf_norm <= 1e-9);
    }

    #[test]
    fn far_separated_responsibilities_are_one_hot() {
        let m = ModelSpec::Mixture(
            EfMixtureModel::new(vec![0.5, 0.5], vec![vec![-50.0, 1.0], vec![50.0, 1.0]], ComponentFamily::GaussianDiagonal)
                .unwrap(),
        );
        let data = Dataset::new(m.family(), vec![vec![-49.0], vec![48.5]], None).unwrap();
        let q = e_step(&m, &data).unwrap();
        // density ratio exp(-100 x) from the two component log densities
        let Posterior::Discrete(r0) = &q.rows[0] else { panic!() };
        let Posterior::Discrete(r1) = &q.rows[1] else { panic!() };
        assert!(r0[1] < 1e-300_f64.max((-100.0f64 * 49.0).exp()) + 1e-300 && r0[0] == 1.0);
        assert!(r1[0] <= (-100.0f64 * 48.5).exp() + 1e-300 && r1[1] == 1.0);
    }

    #[test]
    fn zero_loadings_give_prior_posteriors() {
        let m = ModelSpec::LinearGaussian(LinearGaussianModel::ppca(Matrix::zeros(3, 2), vec![1.0; 3], 0.9).unwrap());
        let data = m.sample(4, 0).unwrap();
        for row in e_step(&m, &data).unwrap().rows {
            assert_eq!(row, Posterior::Gaussian { mean: vec![0.0; 2], cov: Matrix::identity(2) });
        }
    }

    #[test]
    fn exact_posterior_elbo_is_mean_log_likelihood() {
        for truth in [gmm(), sbn(), fa(), poisson(), gamma()] {
            let data = truth.sample(60, 13).unwrap();
            let q = e_step(&truth, &data).unwrap();
            let ll: f64 = data.rows().iter().map(|x| truth.log_marginal(x).unwrap()).sum::<f64>() / 60.0;
            assert!((elbo(&truth, &data, &q).unwrap() - ll).abs() <= 1e-9 * ll.abs().max(1.0), "{:?}", truth.family());
        }
    }

    #[test]
    fn permuted_rows_reach_the_same_elbo() {
        for truth in [gmm(), fa()] {
            let data = truth.sample(200, 21).unwrap();
            let perm: Vec<usize> = (0..200).map(|i| (i * 37 + 11) % 200).collect();
            let shuffled = data.permuted(&perm).unwrap();
            let a = fit_em(&truth, &data, &FitOptions::default()).unwrap();
            let b = fit_em(&truth, &shuffled, &FitOptions::default()).unwrap();
            let (fa_, fb) = (a.elbo_trajectory.last().unwrap(), b.elbo_trajectory.last().unwrap());
            assert!((fa_ - fb).abs() <= 1e-12 * fa_.abs().max(1.0), "{:?}: {fa_} vs {fb}", truth.family());
        }
    }

    #[test]
    fn gamma_recovery() {
        let truth = ModelSpec::Mixture(EfMixtureModel::new(vec![1.0], vec![vec![3.0, 2.0]], ComponentFamily::Gamma).unwrap());
        let data = truth.sample(100_000, 9).unwrap();
        let init = initialize(&truth, &data, 0).unwrap();
        let fit = fit_em(&init, &data, &FitOptions::default()).unwrap();
        let ModelSpec::Mixture(m) = &fit.final_params else { panic!() };
        let theta = &m.components()[0];
        assert!((theta[0] / 3.0 - 1.0).abs() < 0.05 && (theta[1] / 2.0 - 1.0).abs() < 0.05, "{theta:?}");
    }

    #[test]
    fn ppca_isotropic_and_planted() {
        let iso = ModelSpec::LinearGaussian(LinearGaussianModel::ppca(Matrix::zeros(5, 1), vec![0.0; 5], 2.0).unwrap());
        // isotropic data with identical covariance eigenvalues: W clamps to zero
        let rows: Vec<Vec<f64>> = (0..5)
            .flat_map(|i| {
                let mut a = vec![0.0; 5];
                let mut b = vec![0.0; 5];
                a[i] = 1.0;
                b[i] = -1.0;
                [a, b]
            })
            .collect();
        let data = Dataset::new(iso.family(), rows, None).unwrap();
        let fit = fit_ppca_closed_form(data.rows(), 1).unwrap();
        assert_eq!(fit.clamped_columns, vec![0]);
        assert!((fit.model.noise_vars()[0] - 0.2).abs() < 1e-14);

        let dir = [0.5, -0.5, 0.5, 0.5, 0.0];
        let w = Matrix::from_vec(5, 1, dir.iter().map(|v| 2.0 * v).collect()).unwrap();
        let planted = ModelSpec::LinearGaussian(LinearGaussianModel::ppca(w, vec![0.0; 5], 0.5).unwrap());
        let data = planted.sample(10_000, 2).unwrap();
        let fit = fit_ppca_closed_form(data.rows(), 1).unwrap();
        let col = fit.model.w().col(0);
        let cos = crate::numerics::dot(&col, &dir) / crate::numerics::norm2(&col);
        assert!(cos.abs() >= 0.99, "cos = {cos}");
        assert!((fit.model.noise_vars()[0] / 0.5 - 1.0).abs() < 0.05);
        let report = fit_ppca_report(&data, 1, &FitOptions::default()).unwrap();
        assert!(report.converged, "{:?}", report.stationarity);
    }

    #[test]
    fn ppca_em_reaches_closed_form() {
        let w = Matrix::from_vec(4, 1, vec![2.0, 1.0, 0.0, -1.0]).unwrap();
        let truth = ModelSpec::LinearGaussian(LinearGaussianModel::ppca(w, vec![1.0; 4], 0.3).unwrap());
        let data = truth.sample(500, 7).unwrap();
        let closed = fit_ppca_report(&data, 1, &FitOptions::default()).unwrap();
        let start = ModelSpec::LinearGaussian(
            LinearGaussianModel::ppca(Matrix::from_vec(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap(), vec![0.0; 4], 1.0).unwrap(),
        );
        let em = fit_em(&start, &data, &FitOptions::default()).unwrap();
        assert!(em.converged);
        let a = em.elbo_trajectory.last().unwrap();
        let b = closed.elbo_trajectory[0];
        assert!((a - b).abs() < 1e-9 * b.abs(), "{a} vs {b}");
    }

    #[test]
    fn initialization_is_deterministic() {
        for truth in [gmm(), sbn(), fa()] {
            let data = truth.sample(100, 1).unwrap();
            assert_eq!(initialize(&truth, &data, 4).unwrap(), initialize(&truth, &data, 4).unwrap());
        }
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let data = sbn().sample(10, 1).unwrap();
        assert!(matches!(initialize(&gmm(), &data, 0), Err(Error::Contract(_))));
        assert!(matches!(fit_em(&gmm(), &data, &FitOptions::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn trajectory_csv_has_pseudo_column() {
        let truth = poisson();
        let data = truth.sample(50, 2).unwrap();
        let opts = FitOptions { max_iters: 3, ..FitOptions::default() };
        let fit = fit_em(&truth, &data, &opts).unwrap();
        assert!(fit.m_steps >= fit.iterations);
        let csv = fit.trajectory_csv();
        assert_eq!(csv.lines().count(), fit.elbo_trajectory.len() + 1);
        let q = e_step(&fit.final_params, &data).unwrap();
        let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
        let pseudo: f64 = last[2].parse().unwrap();
        assert!((pseudo - pseudo_elbo(&fit.final_params, &data, &q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_component_is_reported() {
        let m = EfMixtureModel::new(vec![0.5, 0.5], vec![vec![0.0, 1.0], vec![5.0, 1.0]], ComponentFamily::GaussianDiagonal)
            .unwrap();
        let spec = ModelSpec::Mixture(m);
        let data = Dataset::new(spec.family(), vec![vec![0.1], vec![-0.2]], None).unwrap();
        let q = VariationalState { rows: vec![Posterior::Discrete(vec![1.0, 0.0]); 2] };
        assert!(matches!(m_step(&spec, &data, &q), Err(Error::DegenerateComponent { component: 1, .. })));
    }
}

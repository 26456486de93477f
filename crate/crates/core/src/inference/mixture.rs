//! EM pieces for exponential-family mixtures.

use crate::efcore::natural_params_and_jacobian;
use crate::error::{Error, Result};
use crate::models::{ComponentFamily, EfMixtureModel};
use crate::numerics::{digamma, trigamma};

/// Responsibility mass below this makes a component degenerate.
pub const MIN_COMPONENT_MASS: f64 = 1e-12;

const SHAPE_LO: f64 = 1e-3;
const SHAPE_HI: f64 = 1e6;
const SHAPE_TOL: f64 = 1e-12;

pub(crate) fn m_step(m: &EfMixtureModel, data: &[Vec<f64>], resp: &[Vec<f64>]) -> Result<EfMixtureModel> {
    let (c_count, d) = (m.num_components(), m.obs_dim());
    let n = data.len() as f64;
    let family = m.component_family();
    let mut pi = Vec::with_capacity(c_count);
    let mut components = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let mass: f64 = resp.iter().map(|r| r[c]).sum();
        if !(mass >= MIN_COMPONENT_MASS) {
            return Err(Error::DegenerateComponent { component: c, mass });
        }
        pi.push(mass / n);
        let degenerate = || Error::DegenerateComponent { component: c, mass };
        let mut mean = vec![0.0; d];
        for (x, r) in data.iter().zip(resp) {
            for i in 0..d {
                mean[i] += r[c] * x[i];
            }
        }
        mean.iter_mut().for_each(|v| *v /= mass);
        let theta = match family {
            ComponentFamily::GaussianDiagonal => {
                let mut var = vec![0.0; d];
                for (x, r) in data.iter().zip(resp) {
                    for i in 0..d {
                        let e = x[i] - mean[i];
                        var[i] += r[c] * e * e;
                    }
                }
                var.iter_mut().for_each(|v| *v /= mass);
                if var.iter().any(|&v| !(v > 0.0)) {
                    return Err(degenerate());
                }
                mean.into_iter().chain(var).collect()
            }
            ComponentFamily::PoissonProduct => {
                if mean.iter().any(|&v| !(v > 0.0)) {
                    return Err(degenerate());
                }
                mean
            }
            ComponentFamily::Gamma => {
                let mut mean_log = vec![0.0; d];
                for (x, r) in data.iter().zip(resp) {
                    for i in 0..d {
                        mean_log[i] += r[c] * x[i].ln();
                    }
                }
                let mut shape = Vec::with_capacity(d);
                let mut rate = Vec::with_capacity(d);
                for i in 0..d {
                    let s = mean[i].ln() - mean_log[i] / mass;
                    if !(s > 0.0) {
                        return Err(degenerate());
                    }
                    let a = solve_gamma_shape(s)?;
                    shape.push(a);
                    rate.push(a / mean[i]);
                }
                shape.into_iter().chain(rate).collect()
            }
        };
        components.push(theta);
    }
    let head: f64 = pi[..c_count - 1].iter().sum();
    pi[c_count - 1] = 1.0 - head;
    EfMixtureModel::new(pi, components, family)
}

/// Solves `ln α − ψ(α) = s` for `s > 0` by Newton steps, falling back to
/// bisection whenever a step leaves the current bracket.
pub fn solve_gamma_shape(s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("gamma shape equation needs s > 0, got {s}")));
    }
    let g = |a: f64| -> Result<f64> { Ok(a.ln() - digamma(a)? - s) };
    let (mut lo, mut hi) = (SHAPE_LO, SHAPE_HI);
    if g(lo)? <= 0.0 {
        return Ok(lo);
    }
    if g(hi)? >= 0.0 {
        return Ok(hi);
    }
    let mut a = ((3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s)).clamp(lo, hi);
    for _ in 0..200 {
        let ga = g(a)?;
        if ga == 0.0 {
            return Ok(a);
        }
        // g is decreasing
        if ga > 0.0 {
            lo = a;
        } else {
            hi = a;
        }
        let slope = 1.0 / a - trigamma(a)?;
        let mut next = a - ga / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - a).abs() <= SHAPE_TOL * a {
            return Ok(next);
        }
        a = next;
    }
    Err(Error::Numerical(format!("gamma shape solve for s = {s} did not converge")))
}

/// Gradient of the ELBO with frozen responsibilities, laid out as
/// `(π_1..π_{C−1}, Θ_1, …, Θ_C)`.
///
/// Each component contributes `J_cᵀ (Σ_n r_nc T(x_n) − N_c ∇A(η_c)) / N`.
pub(crate) fn gradient(m: &EfMixtureModel, data: &[Vec<f64>], resp: &[Vec<f64>]) -> Result<Vec<f64>> {
    let c_count = m.num_components();
    let n = data.len() as f64;
    let pi = m.pi();
    let mut grad = Vec::new();
    let last = c_count - 1;
    for i in 0..last {
        let g: f64 = resp.iter().map(|r| r[i] / pi[i] - r[last] / pi[last]).sum();
        grad.push(g / n);
    }
    let dists = m.distributions()?;
    for (c, dist) in dists.iter().enumerate() {
        let mass: f64 = resp.iter().map(|r| r[c]).sum();
        let mut stats = vec![0.0; dist.sufficient_statistic_arity()];
        for (x, r) in data.iter().zip(resp) {
            for (s, t) in stats.iter_mut().zip(dist.sufficient_statistics(x)?) {
                *s += r[c] * t;
            }
        }
        let mean_t = dist.grad_log_partition();
        let diff: Vec<f64> = stats.iter().zip(&mean_t).map(|(s, e)| (s - mass * e) / n).collect();
        let (_, jac) = natural_params_and_jacobian(m.component_family().ef_family(), &m.components()[c])?;
        grad.extend(jac.tr_matvec(&diff)?);
    }
    Ok(grad)
}

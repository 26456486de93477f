//! EM pieces for sigmoid belief networks with enumerated posteriors.

use crate::error::{Error, Result};
use crate::models::SbnModel;
use crate::numerics::{sigmoid, softplus, solve_spd, Matrix};

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const INNER_CAP: usize = 200;
/// Inner loop stops once the per-datum gradient ∞-norm falls below this.
const INNER_TOL: f64 = 1e-13;

/// Posterior-weighted sufficient statistics: `Q(s) = Σ_n q_n(s)` and
/// `X_d(s) = Σ_n q_n(s) x_nd`.
struct StateStats {
    weight: Vec<f64>,
    x_weight: Vec<Vec<f64>>,
}

fn state_stats(m: &SbnModel, data: &[Vec<f64>], q: &[Vec<f64>]) -> StateStats {
    let k = q[0].len();
    let d = m.obs_dim();
    let mut weight = vec![0.0; k];
    let mut x_weight = vec![vec![0.0; d]; k];
    for (x, qn) in data.iter().zip(q) {
        for s in 0..k {
            weight[s] += qn[s];
            for i in 0..d {
                x_weight[s][i] += qn[s] * x[i];
            }
        }
    }
    StateStats { weight, x_weight }
}

/// Features `(z_s, 1)` of every state.
fn features(m: &SbnModel, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|s| {
            let mut f = m.state_bits(s);
            f.push(1.0);
            f
        })
        .collect()
}

fn objective(theta: &[f64], feats: &[Vec<f64>], stats: &StateStats, d: usize) -> f64 {
    feats
        .iter()
        .enumerate()
        .map(|(s, f)| {
            let a: f64 = f.iter().zip(theta).map(|(f, t)| f * t).sum();
            stats.x_weight[s][d] * a - stats.weight[s] * softplus(a)
        })
        .sum()
}

pub(crate) fn m_step(m: &SbnModel, data: &[Vec<f64>], q: &[Vec<f64>]) -> Result<SbnModel> {
    let (h, d_count) = (m.latent_dim(), m.obs_dim());
    let n = data.len() as f64;
    let stats = state_stats(m, data, q);
    let k = stats.weight.len();
    let feats = features(m, k);

    let mut pi = vec![0.0; h];
    for (s, f) in feats.iter().enumerate() {
        for j in 0..h {
            pi[j] += stats.weight[s] * f[j];
        }
    }
    for (j, p) in pi.iter_mut().enumerate() {
        *p /= n;
        if !(*p > 0.0 && *p < 1.0) {
            return Err(Error::DegenerateComponent { component: j, mass: *p * n });
        }
    }

    let mut w = m.w().clone();
    let mut mu = m.mu().to_vec();
    for d in 0..d_count {
        let mut theta: Vec<f64> = (0..h).map(|j| w[(d, j)]).chain([mu[d]]).collect();
        for _ in 0..INNER_CAP {
            let mut grad = vec![0.0; h + 1];
            let mut curv = Matrix::zeros(h + 1, h + 1);
            for (s, f) in feats.iter().enumerate() {
                let a: f64 = f.iter().zip(&theta).map(|(f, t)| f * t).sum();
                let p = sigmoid(a);
                let r = stats.x_weight[s][d] - stats.weight[s] * p;
                let c = stats.weight[s] * p * (1.0 - p);
                for i in 0..=h {
                    grad[i] += r * f[i];
                    for j in 0..=h {
                        curv[(i, j)] += c * f[i] * f[j];
                    }
                }
            }
            if grad.iter().all(|g| g.abs() <= INNER_TOL * n) {
                break;
            }
            // Newton direction of the concave objective; a small ridge keeps it
            // defined when the sigmoid saturates.
            let ridge = 1e-12 * curv.trace().max(1.0);
            for i in 0..=h {
                curv[(i, i)] += ridge;
            }
            let step = solve_spd(&curv, &grad)?;
            let slope: f64 = step.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let f0 = objective(&theta, &feats, &stats, d);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = theta.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                if objective(&trial, &feats, &stats, d) >= f0 + ARMIJO_C * t * slope {
                    accepted = Some(trial);
                    break;
                }
                t *= SHRINK;
            }
            match accepted {
                Some(next) => theta = next,
                None => break,
            }
        }
        for j in 0..h {
            w[(d, j)] = theta[j];
        }
        mu[d] = theta[h];
    }
    SbnModel::new(pi, w, mu)?.with_enumeration_cap(m.enumeration_cap())
}

/// Gradient with frozen posteriors, laid out as `(π, w_1, …, w_H, μ)`.
pub(crate) fn gradient(m: &SbnModel, data: &[Vec<f64>], q: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (h, d_count) = (m.latent_dim(), m.obs_dim());
    let n = data.len() as f64;
    let stats = state_stats(m, data, q);
    let k = stats.weight.len();
    let pi = m.pi();
    let mut grad = vec![0.0; h + d_count * (h + 1)];
    for s in 0..k {
        let z = m.state_bits(s);
        for j in 0..h {
            grad[j] += stats.weight[s] * if z[j] == 1.0 { 1.0 / pi[j] } else { -1.0 / (1.0 - pi[j]) };
        }
        let a = m.activations(&z)?;
        for d in 0..d_count {
            let r = stats.x_weight[s][d] - stats.weight[s] * sigmoid(a[d]);
            for j in 0..h {
                grad[h + j * d_count + d] += r * z[j];
            }
            grad[h + h * d_count + d] += r;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

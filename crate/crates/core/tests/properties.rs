//! Property tests over random parameters, data and variational states.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use entropy_sums::criterion::{check_part_a, random_parameters, standard_templates};
use entropy_sums::decompose::{
    aggregate_posterior, elbo, elbo_terms, entropy_sum, entropy_sum_with, ppca_stationary_elbo, pseudo_elbo,
};
use entropy_sums::efcore::{
    bernoulli_product_entropy, categorical_entropy, gamma_entropy, gaussian_entropy_diagonal,
    natural_params_and_jacobian, pseudo_entropy_generic, EfDistribution, EfFamily, EntropyKind,
};
use entropy_sums::inference::{e_step, fit_em, initialize, FitOptions, VariationalState};
use entropy_sums::models::{Dataset, LatentDomain, LinearGaussianModel, ModelSpec, Posterior};
use entropy_sums::numerics::{digamma, jacobian_fd, log_gamma, logdet_psd, logsumexp, sym_eigen, Matrix};

fn templates() -> Vec<ModelSpec> {
    standard_templates().into_iter().map(|(_, m)| m).collect()
}

fn random_model(seed: u64, which: usize) -> ModelSpec {
    let t = &templates()[which % templates().len()];
    random_parameters(t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = 1.0 - head;
    p
}

/// A random (non-posterior) variational state of the right shape.
fn random_q(model: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> VariationalState {
    let rows = (0..n)
        .map(|_| match model.latent_domain().unwrap() {
            LatentDomain::Discrete(k) => Posterior::Discrete(random_simplex(rng, k)),
            LatentDomain::Continuous(h) => {
                let b = Matrix::from_vec(h, h, (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let mut cov = b.matmul(&b.transpose()).unwrap();
                for i in 0..h {
                    cov[(i, i)] += 0.1;
                }
                Posterior::Gaussian { mean: (0..h).map(|_| rng.random_range(-2.0..2.0)).collect(), cov }
            }
        })
        .collect();
    VariationalState { rows }
}

fn gaussian_density(x: &[f64], mean: &[f64], cov: &Matrix) -> f64 {
    let d = x.len();
    let e: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let inv = entropy_sums::numerics::spd_inverse(cov).unwrap();
    let quad: f64 = (0..d).map(|i| (0..d).map(|j| e[i] * inv[(i, j)] * e[j]).sum::<f64>()).sum();
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet_psd(cov).unwrap() + quad)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigen_trace_and_determinant(seed in any::<u64>(), n in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let a = b.add(&b.transpose()).unwrap();
        let e = sym_eigen(&a).unwrap();
        let sum: f64 = e.eigenvalues.iter().sum();
        prop_assert!((sum - a.trace()).abs() <= 1e-9 * a.trace().abs().max(1.0));
        // Leibniz determinant as the oracle
        let det = leibniz_det(&a);
        let prod: f64 = e.eigenvalues.iter().product();
        prop_assert!((prod - det).abs() <= 1e-9 * det.abs().max(1.0));
    }

    #[test]
    fn logdet_scales(seed in any::<u64>(), n in 1usize..=6, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut a = b.matmul(&b.transpose()).unwrap();
        for i in 0..n { a[(i, i)] += 0.5; }
        let lhs = logdet_psd(&a.scale(c)).unwrap();
        let rhs = logdet_psd(&a).unwrap() + n as f64 * c.ln();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
    }

    #[test]
    fn special_function_recurrences(a in 0.1f64..50.0) {
        prop_assert!((digamma(a + 1.0).unwrap() - digamma(a).unwrap() - 1.0 / a).abs() <= 1e-10);
        prop_assert!((log_gamma(a + 1.0).unwrap() - log_gamma(a).unwrap() - a.ln()).abs() <= 1e-11);
    }

    #[test]
    fn pseudo_entropy_equals_entropy_for_constant_base(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = |rng: &mut ChaCha8Rng| rng.random_range(-2.0f64..2.0).exp();
        let pi: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.99)).collect();
        let bern = EfDistribution::from_standard(EfFamily::BernoulliProduct, &pi).unwrap();
        prop_assert!((pseudo_entropy_generic(&bern).unwrap().value - bernoulli_product_entropy(&pi).unwrap().value).abs() <= 1e-11);

        let probs = random_simplex(&mut rng, d + 1);
        if probs.iter().all(|&p| p > 1e-6) {
            let cat = EfDistribution::from_standard(EfFamily::Categorical, &probs[..d]).unwrap();
            prop_assert!((pseudo_entropy_generic(&cat).unwrap().value - categorical_entropy(&probs).unwrap().value).abs() <= 1e-11);
        }

        let var: Vec<f64> = (0..d).map(|_| pos(&mut rng)).collect();
        let std: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).chain(var.iter().cloned()).collect();
        let g = EfDistribution::from_standard(EfFamily::GaussianDiagonal, &std).unwrap();
        prop_assert!((pseudo_entropy_generic(&g).unwrap().value - gaussian_entropy_diagonal(&var).unwrap().value).abs() <= 1e-11);

        let (a, b) = (pos(&mut rng), pos(&mut rng));
        let gm = EfDistribution::from_standard(EfFamily::Gamma, &[a, b]).unwrap();
        prop_assert!((pseudo_entropy_generic(&gm).unwrap().value - gamma_entropy(a, b).unwrap().value).abs() <= 1e-11);
    }

    #[test]
    fn grad_log_partition_and_jacobians_match_fd(seed in any::<u64>(), d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = |rng: &mut ChaCha8Rng| rng.random_range(-1.5f64..1.5).exp();
        let probs = random_simplex(&mut rng, d + 1);
        prop_assume!(probs.iter().all(|&p| p > 1e-3));
        let means: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vars: Vec<f64> = (0..d).map(|_| pos(&mut rng)).collect();
        let cases: Vec<(EfFamily, Vec<f64>)> = vec![
            (EfFamily::BernoulliProduct, (0..d).map(|_| rng.random_range(0.05..0.95)).collect()),
            (EfFamily::Categorical, probs[..d].to_vec()),
            (EfFamily::GaussianScalarVar, means.iter().cloned().chain([vars[0]]).collect()),
            (EfFamily::GaussianDiagonal, means.iter().cloned().chain(vars.iter().cloned()).collect()),
            (EfFamily::Gamma, (0..2 * d).map(|_| pos(&mut rng)).collect()),
            (EfFamily::PoissonProduct, (0..d).map(|_| pos(&mut rng)).collect()),
        ];
        for (family, standard) in cases {
            let (eta, jac) = natural_params_and_jacobian(family, &standard).unwrap();
            let all: Vec<usize> = (0..standard.len()).collect();
            let fd = jacobian_fd(|s: &[f64]| Ok(natural_params_and_jacobian(family, s)?.0), &standard, &all).unwrap();
            prop_assert!(fd.sub(&jac).unwrap().max_abs() <= 1e-6, "{family:?} jacobian");

            let dist = EfDistribution::new(family, eta.clone()).unwrap();
            let grad = dist.grad_log_partition();
            let idx: Vec<usize> = (0..eta.len()).collect();
            let fd_a = jacobian_fd(|e: &[f64]| Ok(vec![EfDistribution::new(family, e.to_vec())?.log_partition()]), &eta, &idx).unwrap();
            for (i, g) in grad.iter().enumerate() {
                prop_assert!((fd_a[(0, i)] - g).abs() <= 1e-6, "{family:?} grad A");
            }
        }
    }

    #[test]
    fn entropies_are_permutation_invariant(seed in any::<u64>(), d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut rev = pi.clone();
        rev.reverse();
        prop_assert_eq!(bernoulli_product_entropy(&pi).unwrap().value, bernoulli_product_entropy(&rev).unwrap().value);
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..5.0)).collect();
        let mut rot = var.clone();
        rot.rotate_left(1);
        prop_assert_eq!(gaussian_entropy_diagonal(&var).unwrap().value, gaussian_entropy_diagonal(&rot).unwrap().value);
    }
}

fn leibniz_det(a: &Matrix) -> f64 {
    let n = a.rows();
    match n {
        1 => a[(0, 0)],
        _ => (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> =
                    (1..n).map(|i| (0..n).filter(|&k| k != j).map(|k| a[(i, k)]).collect()).collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[(0, j)] * leibniz_det(&Matrix::from_rows(&minor).unwrap())
            })
            .sum(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn marginal_is_logsumexp_or_gaussian_integral(seed in any::<u64>(), which in 0usize..7) {
        let m = random_model(seed, which);
        let data = m.sample(5, seed ^ 1).unwrap();
        for x in data.rows() {
            let lm = m.log_marginal(x).unwrap();
            let oracle = match (&m, m.latent_domain().unwrap()) {
                (_, LatentDomain::Discrete(k)) => {
                    let lj: Vec<f64> = (0..k).map(|s| m.log_joint(x, &m.discrete_latent(s).unwrap()).unwrap()).collect();
                    logsumexp(&lj)
                }
                (ModelSpec::LinearGaussian(lg), _) => {
                    // N(W m₀ + μ, W V₀ Wᵀ + Ψ) assembled from scratch
                    let w = lg.w();
                    let mean: Vec<f64> = (0..lg.obs_dim())
                        .map(|i| (0..lg.latent_dim()).map(|j| w[(i, j)] * lg.prior_mean()[j]).sum::<f64>() + lg.mu()[i])
                        .collect();
                    let wv = w.matmul(&Matrix::from_diag(lg.prior_var())).unwrap();
                    let cov = wv.matmul(&w.transpose()).unwrap().add(&Matrix::from_diag(&lg.noise_vars())).unwrap();
                    gaussian_density(x, &mean, &cov)
                }
                _ => unreachable!(),
            };
            prop_assert!((lm - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn elbo_invariants_at_random_q(seed in any::<u64>(), which in 0usize..7) {
        let m = random_model(seed, which);
        let data = m.sample(12, seed ^ 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let q = random_q(&m, data.len(), &mut rng);
        for t in elbo_terms(&m, &data, &q).unwrap() {
            prop_assert!(t.kl >= -1e-12);
        }
        let dec = entropy_sum(&m, &q).unwrap();
        prop_assert_eq!(dec.total, dec.mean_q_entropy - dec.prior_entropy - dec.expected_obs_entropy);
        if matches!(m.latent_domain().unwrap(), LatentDomain::Discrete(_)) {
            prop_assert!(dec.mean_q_entropy >= 0.0);
            let bar = aggregate_posterior(&q).unwrap();
            prop_assert!((bar.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
        }
        if let ModelSpec::Mixture(mx) = &m {
            prop_assert!(dec.prior_entropy >= 0.0 && dec.prior_entropy <= (mx.num_components() as f64).ln() + 1e-12);
        }
        if m.has_constant_base_measure() {
            let a = entropy_sum_with(&m, &q, EntropyKind::Entropy).unwrap().total;
            let b = entropy_sum_with(&m, &q, EntropyKind::PseudoEntropy).unwrap().total;
            prop_assert!((a - b).abs() <= 1e-11 * a.abs().max(1.0));
            prop_assert_eq!(pseudo_elbo(&m, &data, &q).unwrap(), elbo(&m, &data, &q).unwrap());
        }
        // exact posteriors: ELBO is the mean log marginal
        let exact = e_step(&m, &data).unwrap();
        let ll: f64 = data.rows().iter().map(|x| m.log_marginal(x).unwrap()).sum::<f64>() / data.len() as f64;
        prop_assert!((elbo(&m, &data, &exact).unwrap() - ll).abs() <= 1e-9 * ll.abs().max(1.0));
        // and never below any other q
        prop_assert!(elbo(&m, &data, &q).unwrap() <= ll + 1e-9 * ll.abs().max(1.0));
    }

    #[test]
    fn posterior_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let m = random_model(seed, 4);
        let data = m.sample(3, seed).unwrap();
        let ModelSpec::Mixture(mx) = &m else { unreachable!() };
        let dists = mx.distributions().unwrap();
        for x in data.rows() {
            let lj = mx.log_joint_all(x, &dists).unwrap();
            let shifted: Vec<f64> = lj.iter().map(|v| v + shift).collect();
            let norm = |v: &[f64]| { let l = logsumexp(v); v.iter().map(|a| (a - l).exp()).collect::<Vec<f64>>() };
            let (a, b) = (norm(&lj), norm(&shifted));
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ppca_closed_form_matches_entropy_sum(seed in any::<u64>(), d in 2usize..7, h in 1usize..3) {
        prop_assume!(h < d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_vec(d, h, (0..d * h).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let s2 = rng.random_range(-2.0f64..2.0).exp();
        let m = ModelSpec::LinearGaussian(LinearGaussianModel::ppca(w.clone(), vec![0.0; d], s2).unwrap());
        let data = m.sample(3, seed).unwrap();
        let q = e_step(&m, &data).unwrap();
        let closed = ppca_stationary_elbo(&w, s2, d, h).unwrap();
        prop_assert!((entropy_sum(&m, &q).unwrap().total - closed).abs() <= 1e-10 * closed.abs().max(1.0));
    }

    #[test]
    fn scaled_prior_parameterization_keeps_verdict(seed in any::<u64>(), which in 0usize..7) {
        let m = random_model(seed, which);
        let Ok(psi) = m.prior_params() else { return Ok(()) };
        let zeta = |p: &[f64]| Ok(m.with_prior_params(p)?.prior_natural_map()?.natural);
        let scaled = |p: &[f64]| zeta(&p.iter().map(|v| v / 2.0).collect::<Vec<_>>());
        let psi2: Vec<f64> = psi.iter().map(|v| 2.0 * v).collect();
        let a = check_part_a(zeta, &psi, None, None, 1e-8).unwrap();
        let b = check_part_a(scaled, &psi2, None, None, 1e-8).unwrap();
        prop_assert_eq!(a.pass, b.pass);
    }

    #[test]
    fn dataset_jsonl_round_trips_bits(seed in any::<u64>(), which in 0usize..7) {
        let m = random_model(seed, which);
        let data = m.sample(6, seed).unwrap();
        let text = data.to_jsonl(None).unwrap();
        let back = Dataset::read_jsonl(text.as_bytes()).unwrap();
        prop_assert_eq!(back.rows(), data.rows());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn em_never_decreases_the_elbo(seed in any::<u64>(), which in 0usize..7) {
        let truth = random_model(seed, which);
        let data = truth.sample(80, seed ^ 5).unwrap();
        let Ok(init) = initialize(&truth, &data, seed) else { return Ok(()) };
        for accelerate in [false, true] {
            let opts = FitOptions { max_iters: 30, accelerate, ..FitOptions::default() };
            // degenerate components are a legitimate outcome on tiny random data
            let Ok(fit) = fit_em(&init, &data, &opts) else { continue };
            for pair in fit.elbo_trajectory.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-10, "{:?}: {} -> {}", truth.family(), pair[0], pair[1]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn certification_passes_with_small_residuals_and_is_deterministic(seed in any::<u64>()) {
        let opts = entropy_sums::criterion::CriterionOptions::default();
        for (name, template) in standard_templates() {
            let a = entropy_sums::criterion::certify_model(name, &template, 50, seed, &opts).unwrap();
            prop_assert!(a.pass, "{name} seed {seed}");
            for c in &a.certificates {
                prop_assert!(c.part_b.residual_rel <= 1e-9, "{name}: {}", c.part_b.residual_rel);
            }
            let b = entropy_sums::criterion::certify_model(name, &template, 50, seed, &opts).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

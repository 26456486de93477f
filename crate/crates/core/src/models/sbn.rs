//! Two-layer sigmoid belief network with binary latents and binary
//! observables.

use serde::{Deserialize, Serialize};

use crate::efcore::{natural_params_and_jacobian, EfFamily};
use crate::error::{contract, domain, Error, Result};
use crate::numerics::{logsumexp, sigmoid, softplus, Matrix};

use super::NaturalMap;

pub const DEFAULT_ENUMERATION_CAP: usize = 20;

fn default_cap() -> usize {
    DEFAULT_ENUMERATION_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "SbnRaw")]
pub struct SbnModel {
    h: usize,
    d: usize,
    pi: Vec<f64>,
    w: Matrix,
    mu: Vec<f64>,
    enumeration_cap: usize,
}

#[derive(Serialize, Deserialize)]
struct SbnRaw {
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "D")]
    d: usize,
    pi: Vec<f64>,
    #[serde(rename = "W")]
    w: Matrix,
    mu: Vec<f64>,
    #[serde(default = "default_cap")]
    enumeration_cap: usize,
}

impl From<SbnModel> for SbnRaw {
    fn from(m: SbnModel) -> Self {
        SbnRaw { h: m.h, d: m.d, pi: m.pi, w: m.w, mu: m.mu, enumeration_cap: m.enumeration_cap }
    }
}

impl<'de> Deserialize<'de> for SbnModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = SbnRaw::deserialize(de)?;
        if raw.w.rows() != raw.d || raw.w.cols() != raw.h {
            return Err(serde::de::Error::custom(format!(
                "W is {}x{}, expected D x H = {}x{}",
                raw.w.rows(),
                raw.w.cols(),
                raw.d,
                raw.h
            )));
        }
        SbnModel::new(raw.pi, raw.w, raw.mu)
            .and_then(|m| m.with_enumeration_cap(raw.enumeration_cap))
            .map_err(serde::de::Error::custom)
    }
}

impl SbnModel {
    /// `w` is `D × H`; `pi` has length `H` and `mu` length `D`.
    pub fn new(pi: Vec<f64>, w: Matrix, mu: Vec<f64>) -> Result<Self> {
        let (d, h) = (w.rows(), w.cols());
        if h == 0 || d == 0 {
            return contract("sbn needs at least one latent and one observable");
        }
        if h > 63 {
            return Err(Error::Capacity(format!("H = {h} exceeds the 63-bit latent encoding")));
        }
        if pi.len() != h || mu.len() != d {
            return contract(format!("sbn shapes: pi {} vs H {h}, mu {} vs D {d}", pi.len(), mu.len()));
        }
        if pi.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return domain("sbn prior probabilities must lie in (0, 1)");
        }
        if !w.is_finite() || mu.iter().any(|v| !v.is_finite()) {
            return domain("sbn weights and offsets must be finite");
        }
        Ok(SbnModel { h, d, pi, w, mu, enumeration_cap: DEFAULT_ENUMERATION_CAP })
    }

    pub fn with_enumeration_cap(mut self, cap: usize) -> Result<Self> {
        if cap == 0 || cap > 30 {
            return contract(format!("enumeration cap {cap} outside 1..=30"));
        }
        self.enumeration_cap = cap;
        Ok(self)
    }

    pub fn latent_dim(&self) -> usize {
        self.h
    }

    pub fn obs_dim(&self) -> usize {
        self.d
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn enumeration_cap(&self) -> usize {
        self.enumeration_cap
    }

    /// Number of latent states, or a capacity error above the cap.
    pub fn num_states(&self) -> Result<usize> {
        if self.h > self.enumeration_cap {
            return Err(Error::Capacity(format!(
                "H = {} exceeds the enumeration cap {}",
                self.h, self.enumeration_cap
            )));
        }
        Ok(1usize << self.h)
    }

    /// Latent bits of state `s` in binary-counting order: `z_h = (s >> h) & 1`.
    pub fn state_bits(&self, s: usize) -> Vec<f64> {
        (0..self.h).map(|h| ((s >> h) & 1) as f64).collect()
    }

    /// Pre-activations `Wz + μ`.
    pub fn activations(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let mut a = self.w.matvec(z)?;
        for (a, m) in a.iter_mut().zip(&self.mu) {
            *a += m;
        }
        Ok(a)
    }

    pub fn conditional_means(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(z)?.into_iter().map(sigmoid).collect())
    }

    pub fn log_prior(&self, z: &[f64]) -> Result<f64> {
        self.check_z(z)?;
        Ok(z.iter()
            .zip(&self.pi)
            .map(|(&z, &p)| if z == 1.0 { p.ln() } else { (1.0 - p).ln() })
            .sum())
    }

    pub fn log_likelihood(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        let a = self.activations(z)?;
        Ok(x.iter().zip(&a).map(|(&x, &a)| x * a - softplus(a)).sum())
    }

    /// Per-state pre-activations and log prior, shared by all data rows.
    pub fn state_table(&self) -> Result<Vec<(Vec<f64>, f64)>> {
        let k = self.num_states()?;
        (0..k)
            .map(|s| {
                let z = self.state_bits(s);
                Ok((self.activations(&z)?, self.log_prior(&z)?))
            })
            .collect()
    }

    /// `log p(x, z_s)` for every state `s`.
    pub fn log_joint_all(&self, x: &[f64], table: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(table
            .iter()
            .map(|(a, lp)| lp + x.iter().zip(a).map(|(&x, &a)| x * a - softplus(a)).sum::<f64>())
            .collect())
    }

    pub fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        Ok(logsumexp(&self.log_joint_all(x, &self.state_table()?)?))
    }

    pub fn prior_natural_map(&self) -> Result<NaturalMap> {
        let (zeta, jacobian) = natural_params_and_jacobian(EfFamily::BernoulliProduct, &self.pi)?;
        let coefficients = self.pi.iter().zip(&zeta).map(|(p, z)| p * (1.0 - p) * z).collect();
        Ok(NaturalMap { natural: zeta, jacobian, coefficients })
    }

    /// `η(z) = Σ_h w_h z_h + μ` with `θ = (w_1, …, w_H, μ)`, so `J(z) =
    /// (z_1 I, …, z_H I, I)` and `β = θ`.
    pub fn observable_natural_map(&self, z: &[f64]) -> Result<NaturalMap> {
        let natural = self.activations(z)?;
        let d = self.d;
        let mut jacobian = Matrix::zeros(d, d * (self.h + 1));
        for i in 0..d {
            for (h, &zh) in z.iter().enumerate() {
                jacobian[(i, h * d + i)] = zh;
            }
            jacobian[(i, self.h * d + i)] = 1.0;
        }
        Ok(NaturalMap { natural, jacobian, coefficients: self.observable_params() })
    }

    /// `(w_1, …, w_H, μ)` with `w_h` the `h`-th column of `W`.
    pub fn observable_params(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.d * (self.h + 1));
        for h in 0..self.h {
            theta.extend(self.w.col(h));
        }
        theta.extend_from_slice(&self.mu);
        theta
    }

    pub fn with_observable_params(&self, theta: &[f64]) -> Result<Self> {
        let d = self.d;
        if theta.len() != d * (self.h + 1) {
            return contract(format!("sbn observable vector has length {}, expected {}", theta.len(), d * (self.h + 1)));
        }
        let cols: Vec<Vec<f64>> = (0..self.h).map(|h| theta[h * d..(h + 1) * d].to_vec()).collect();
        let w = Matrix::from_cols(&cols)?;
        let mu = theta[self.h * d..].to_vec();
        SbnModel::new(self.pi.clone(), w, mu)?.with_enumeration_cap(self.enumeration_cap)
    }

    pub fn with_prior_params(&self, pi: &[f64]) -> Result<Self> {
        SbnModel::new(pi.to_vec(), self.w.clone(), self.mu.clone())?.with_enumeration_cap(self.enumeration_cap)
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.h || z.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract(format!("sbn latent must be a binary vector of length {}", self.h));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d || x.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract(format!("sbn observation must be a binary vector of length {}", self.d));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, h: usize, d: usize) -> SbnModel {
        let pi = (0..h).map(|_| rng.random_range(0.05..0.95)).collect();
        let w = Matrix::from_vec(d, h, (0..d * h).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mu = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        SbnModel::new(pi, w, mu).unwrap()
    }

    #[test]
    fn zero_state_gives_half() {
        let m = SbnModel::new(vec![0.5; 2], Matrix::zeros(3, 2), vec![0.0; 3]).unwrap();
        assert_eq!(m.conditional_means(&[1.0, 0.0]).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn conditional_means_monotone_in_offset() {
        let mut last = 1.0;
        for mu in [-1.0, -5.0, -20.0, -40.0] {
            let m = SbnModel::new(vec![0.5], Matrix::zeros(1, 1), vec![mu]).unwrap();
            let p = m.conditional_means(&[1.0]).unwrap()[0];
            assert!(p > 0.0 && p < last);
            last = p;
        }
        assert!(last < 1e-17);
    }

    #[test]
    fn conditional_means_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 3, 4);
        let z = [1.0, 0.0, 1.0];
        let got = m.conditional_means(&z).unwrap();
        for d in 0..4 {
            let a = m.w()[(d, 0)] + m.w()[(d, 2)] + m.mu()[d];
            assert!((got[d] - 1.0 / (1.0 + (-a).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn enumeration_sums_to_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 2, 3);
        let x = [1.0, 0.0, 1.0];
        // Marginal by hand over the four states.
        let mut direct = 0.0;
        for s in 0..4usize {
            let z = [(s & 1) as f64, ((s >> 1) & 1) as f64];
            let mut p = 1.0;
            for h in 0..2 {
                p *= if z[h] == 1.0 { m.pi()[h] } else { 1.0 - m.pi()[h] };
            }
            for d in 0..3 {
                let a = m.w()[(d, 0)] * z[0] + m.w()[(d, 1)] * z[1] + m.mu()[d];
                let q = 1.0 / (1.0 + (-a).exp());
                p *= if x[d] == 1.0 { q } else { 1.0 - q };
            }
            direct += p;
        }
        assert!((m.log_marginal(&x).unwrap() - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let m = SbnModel::new(vec![0.5; 4], Matrix::zeros(2, 4), vec![0.0; 2]).unwrap();
        assert!(matches!(m.clone().with_enumeration_cap(3).unwrap().num_states(), Err(Error::Capacity(_))));
        assert_eq!(m.num_states().unwrap(), 16);
    }

    #[test]
    fn natural_maps_satisfy_criterion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 3, 4);
        let a = m.prior_natural_map().unwrap();
        let ja = a.jacobian.matvec(&a.coefficients).unwrap();
        for (x, y) in ja.iter().zip(&a.natural) {
            assert!((x - y).abs() < 1e-12);
        }
        for s in 0..8 {
            let b = m.observable_natural_map(&m.state_bits(s)).unwrap();
            let jb = b.jacobian.matvec(&b.coefficients).unwrap();
            for (x, y) in jb.iter().zip(&b.natural) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let half = SbnModel::new(vec![0.5; 2], Matrix::zeros(1, 2), vec![0.0]).unwrap();
        assert!(half.prior_natural_map().unwrap().coefficients.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn observable_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 2, 3);
        let back = m.with_observable_params(&m.observable_params()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SbnModel::new(vec![1.0], Matrix::zeros(1, 1), vec![0.0]).is_err());
        let m = SbnModel::new(vec![0.5], Matrix::zeros(1, 1), vec![0.0]).unwrap();
        assert!(m.log_likelihood(&[0.5], &[1.0]).is_err());
        assert!(m.log_prior(&[2.0]).is_err());
    }
}

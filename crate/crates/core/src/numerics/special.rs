//! Log-gamma, digamma and log-factorial on the positive reals.

use std::f64::consts::PI;

use crate::error::{domain, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Exact `ln(k!)` for `k <= 20` (`20!` still fits in a `u64`).
fn factorial_table() -> &'static [f64; 21] {
    static TABLE: std::sync::OnceLock<[f64; 21]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 21];
        let mut f: u64 = 1;
        for (k, slot) in t.iter_mut().enumerate().skip(1) {
            f *= k as u64;
            *slot = (f as f64).ln();
        }
        t
    })
}

/// `ln Γ(a)` for `a > 0`.
pub fn log_gamma(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return domain(format!("log_gamma requires a finite a > 0, got {a}"));
    }
    if a.fract() == 0.0 && a <= 21.0 {
        return Ok(factorial_table()[a as usize - 1]);
    }
    Ok(lanczos_ln_gamma(a))
}

fn lanczos_ln_gamma(a: f64) -> f64 {
    if a < 0.5 {
        // reflection: Γ(a)Γ(1-a) = π / sin(πa)
        return (PI / (PI * a).sin()).ln() - lanczos_ln_gamma(1.0 - a);
    }
    let x = a - 1.0;
    let t = x + LANCZOS_G + 0.5;
    let mut sum = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// `ψ(a) = d/da ln Γ(a)` for `a > 0`.
pub fn digamma(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return domain(format!("digamma requires a finite a > 0, got {a}"));
    }
    let mut x = a;
    let mut shift = 0.0;
    while x < 6.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // asymptotic series in 1/x², Bernoulli-number coefficients B_2k / (2k)
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(shift + x.ln() - 0.5 * inv - series)
}

/// `ψ'(a)`, the derivative of the digamma function, for `a > 0`.
pub fn trigamma(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return domain(format!("trigamma requires a finite a > 0, got {a}"));
    }
    let mut x = a;
    let mut shift = 0.0;
    while x < 10.0 {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    Ok(shift + series)
}

/// `ln(k!)`; exact table up to `k = 20`, log-gamma beyond.
pub fn log_factorial(k: i64) -> Result<f64> {
    if k < 0 {
        return domain(format!("log_factorial of negative integer {k}"));
    }
    if k <= 20 {
        return Ok(factorial_table()[k as usize]);
    }
    log_gamma(k as f64 + 1.0)
}

/// `ln(x!)` for a count stored as `f64`; rejects negative or fractional values.
pub fn log_factorial_f64(x: f64) -> Result<f64> {
    if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
        return domain(format!("expected a non-negative integer count, got {x}"));
    }
    log_factorial(x as i64)
}

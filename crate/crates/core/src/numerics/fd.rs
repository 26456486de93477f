//! Central finite differences, five-point stencil.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Step for coordinate value `x`: relative for large and small coordinates,
/// floored at `1e-7` near zero.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1e-2)
}

fn stencil<F>(f: &F, x: &[f64], j: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let h = fd_step(x[j]);
    let mut p = x.to_vec();
    let mut eval = |offset: f64| -> Result<Vec<f64>> {
        p[j] = x[j] + offset;
        let v = f(&p)?;
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value near coordinate {j}")));
        }
        Ok(v)
    };
    let fp1 = eval(h)?;
    let fm1 = eval(-h)?;
    let fp2 = eval(2.0 * h)?;
    let fm2 = eval(-2.0 * h)?;
    Ok((0..fp1.len())
        .map(|i| (8.0 * (fp1[i] - fm1[i]) - (fp2[i] - fm2[i])) / (12.0 * h))
        .collect())
}

/// Jacobian of `f` at `x` with respect to the coordinates in `wrt`, one
/// column per listed coordinate.
pub fn jacobian_fd<F>(f: F, x: &[f64], wrt: &[usize]) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut cols = Vec::with_capacity(wrt.len());
    for &j in wrt {
        cols.push(stencil(&f, x, j)?);
    }
    let rows = cols.first().map_or(0, Vec::len);
    let mut jac = Matrix::zeros(rows, wrt.len());
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            jac[(r, c)] = *v;
        }
    }
    Ok(jac)
}

/// Gradient of a scalar function.
pub fn gradient_fd<F>(f: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let wrapped = |p: &[f64]| f(p).map(|v| vec![v]);
    let all: Vec<usize> = (0..x.len()).collect();
    let jac = jacobian_fd(wrapped, x, &all)?;
    Ok(jac.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_derivatives_are_exact_to_rounding() {
        let g = gradient_fd(|p| Ok(p[0].powi(3) + 2.0 * p[0] * p[1]), &[1.5, -2.0]).unwrap();
        assert!((g[0] - (3.0 * 2.25 - 4.0)).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn log_near_small_argument() {
        let j = jacobian_fd(|p| Ok(vec![p[0].ln()]), &[1e-3], &[0]).unwrap();
        assert!((j[(0, 0)] - 1e3).abs() / 1e3 < 1e-7);
    }
}

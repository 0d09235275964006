//! Central finite differences.
//!
//! Everything here is deliberately formula-free: the helpers only ever
//! evaluate the function they are handed, so they can serve as the oracle
//! for analytic derivatives supplied elsewhere in the crate.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Step and tolerance used when validating analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub tol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
        }
    }
}

/// Mixed absolute/relative error `|a - b| / max(1, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn rel_err_c(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn derivative(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    (f(t + h) - f(t - h)) / (2.0 * h)
}

pub fn derivative_c(f: impl Fn(f64) -> Complex64, t: f64, h: f64) -> Complex64 {
    (f(t + h) - f(t - h)) / (2.0 * h)
}

pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn gradient_c(f: impl Fn(&[f64]) -> Complex64, x: &[f64], h: f64) -> Vec<Complex64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Jacobian of `f: R^n -> R^m`; column `j` is the derivative along `e_j`.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(n);
    for j in 0..n {
        probe[j] = x[j] + h;
        let up = f(&probe);
        probe[j] = x[j] - h;
        let down = f(&probe);
        probe[j] = x[j];
        columns.push(
            up.iter()
                .zip(&down)
                .map(|(u, d)| (u - d) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let m = columns.first().map_or_else(|| f(x).len(), Vec::len);
    DMatrix::from_fn(m, n, |i, j| columns[j][i])
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0, f64::max)
}

pub fn max_rel_err_matrix(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    max_rel_err(analytic.as_slice(), numeric.as_slice())
}

/// Deterministic, well-spread probe points in `[-scale, scale]^dim` (Halton sequence).
pub fn probe_points(dim: usize, count: usize, scale: f64) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    (1..=count as u64)
        .map(|k| {
            (0..dim)
                .map(|axis| {
                    let base = PRIMES[axis % PRIMES.len()];
                    // shift by axis so that dimensions beyond the prime table decorrelate
                    let u = radical_inverse(k + (axis / PRIMES.len()) as u64 * 7919, base);
                    scale * (2.0 * u - 1.0)
                })
                .collect()
        })
        .collect()
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut acc = 0.0;
    while k > 0 {
        acc += (k % base) as f64 * factor;
        k /= base;
        factor *= inv;
    }
    acc
}

/// Convergence order from three estimates at steps `h`, `h/2`, `h/4`.
///
/// Uses successive differences, so no exact value is needed. Returns `None`
/// when the differences are at the rounding floor and no order is observable.
pub fn observed_order(at_h: f64, at_half: f64, at_quarter: f64) -> Option<f64> {
    observed_order_above(at_h, at_half, at_quarter, 64.0 * f64::EPSILON * at_quarter.abs().max(1.0))
}

/// [`observed_order`] with an explicit noise floor for the differences, e.g.
/// the cancellation error `eps |f| / h` of a central difference of `f`.
pub fn observed_order_above(at_h: f64, at_half: f64, at_quarter: f64, floor: f64) -> Option<f64> {
    let coarse = (at_h - at_half).abs();
    let fine = (at_half - at_quarter).abs();
    if coarse <= floor || fine <= floor {
        None
    } else {
        Some((coarse / fine).log2())
    }
}

pub(crate) fn validate_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidStep(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_quadratic_is_exact_enough() {
        let g = gradient(|x| x[0] * x[0] + 3.0 * x[0] * x[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_shape_is_rows_by_inputs() {
        let j = jacobian(|x| vec![x[0] * x[1], x[0], x[1].sin()], &[0.5, 0.25], 1e-5);
        assert_eq!((j.nrows(), j.ncols()), (3, 2));
        assert!((j[(0, 0)] - 0.25).abs() < 1e-9);
        assert!((j[(2, 1)] - 0.25f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn observed_order_of_central_difference_is_two() {
        let d = |h: f64| derivative(f64::exp, 0.3, h);
        let order = observed_order(d(0.1), d(0.05), d(0.025)).unwrap();
        assert!((order - 2.0).abs() < 0.05, "order {order}");
    }

    #[test]
    fn observed_order_is_none_for_exact_differences() {
        let d = |h: f64| derivative(|t| t * t, 0.3, h);
        assert!(observed_order(d(0.1), d(0.05), d(0.025)).is_none());
    }

    #[test]
    fn probe_points_stay_in_box() {
        let pts = probe_points(3, 50, 2.0);
        assert_eq!(pts.len(), 50);
        assert!(pts.iter().flatten().all(|v| v.abs() <= 2.0));
    }
}

//! One-dimensional Gauss rules and their tensor products.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A one-dimensional rule `sum_i w_i f(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    /// Gauss–Hermite rule for the weight `exp(-u^2)` on the real line.
    pub fn gauss_hermite(order: usize) -> Self {
        assert!(order > 0, "quadrature order must be positive");
        const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..m {
            // initial guesses for the largest roots, then by extrapolation from previous roots
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        nodes.reverse();
        weights.reverse();
        Self { nodes, weights }
    }

    /// Gauss–Hermite rule rescaled to integrate against the standard normal density.
    pub fn standard_normal(order: usize) -> Self {
        let gh = Self::gauss_hermite(order);
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        Self {
            nodes: gh.nodes.iter().map(|u| u * std::f64::consts::SQRT_2).collect(),
            weights: gh.weights.iter().map(|w| w * inv_sqrt_pi).collect(),
        }
    }

    /// Gauss–Legendre rule on `[-1, 1]`.
    pub fn gauss_legendre(order: usize) -> Self {
        assert!(order > 0, "quadrature order must be positive");
        let n = order;
        let nf = n as f64;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Composite Gauss–Legendre on `[a, b]` with `panels` equal sub-intervals.
    pub fn composite_legendre(a: f64, b: f64, panels: usize, order: usize) -> Self {
        assert!(panels > 0 && b > a, "composite rule needs a non-empty interval");
        let base = Self::gauss_legendre(order);
        let width = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let mid = a + (p as f64 + 0.5) * width;
            for (x, w) in base.nodes.iter().zip(&base.weights) {
                nodes.push(mid + 0.5 * width * x);
                weights.push(0.5 * width * w);
            }
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Tensor product of one-dimensional rules.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    pub axes: Vec<Rule1d>,
}

impl TensorRule {
    pub fn new(axes: Vec<Rule1d>) -> Self {
        Self { axes }
    }

    pub fn isotropic(rule: Rule1d, dim: usize) -> Self {
        Self {
            axes: vec![rule; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn point_count(&self) -> usize {
        self.axes.iter().map(Rule1d::len).product()
    }

    /// Visit every node as `(node, weight)` in lexicographic order.
    pub fn for_each(&self, mut f: impl FnMut(&[f64], f64)) {
        let dim = self.dim();
        if dim == 0 {
            f(&[], 1.0);
            return;
        }
        let mut idx = vec![0usize; dim];
        let mut point: Vec<f64> = self.axes.iter().map(|a| a.nodes[0]).collect();
        loop {
            let w: f64 = idx
                .iter()
                .zip(&self.axes)
                .map(|(&i, a)| a.weights[i])
                .product();
            f(&point, w);
            let mut axis = dim;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < self.axes[axis].len() {
                    point[axis] = self.axes[axis].nodes[idx[axis]];
                    break;
                }
                idx[axis] = 0;
                point[axis] = self.axes[axis].nodes[0];
            }
        }
    }

    /// Weighted sum of a complex integrand.
    ///
    /// Slices along the first axis are summed in parallel and then reduced in
    /// index order, so the result does not depend on the thread count.
    /// The first non-finite evaluation (in lexicographic order) is reported.
    pub fn integrate<F>(&self, f: F) -> Result<Complex64>
    where
        F: Fn(&[f64]) -> Complex64 + Sync,
    {
        if self.dim() == 0 {
            let v = f(&[]);
            return finite_or(v, &[]).map(|_| v);
        }
        let first = &self.axes[0];
        let rest = TensorRule::new(self.axes[1..].to_vec());
        let partials: Vec<Result<Complex64>> = (0..first.len())
            .into_par_iter()
            .map(|i| {
                let mut point = vec![0.0; self.dim()];
                point[0] = first.nodes[i];
                let mut acc = Complex64::new(0.0, 0.0);
                let mut fault: Option<Error> = None;
                rest.for_each(|tail, w| {
                    if fault.is_some() {
                        return;
                    }
                    point[1..].copy_from_slice(tail);
                    let v = f(&point);
                    if let Err(e) = finite_or(v, &point) {
                        fault = Some(e);
                        return;
                    }
                    acc += v * w;
                });
                match fault {
                    Some(e) => Err(e),
                    None => Ok(acc * first.weights[i]),
                }
            })
            .collect();
        let mut total = Complex64::new(0.0, 0.0);
        for p in partials {
            total += p?;
        }
        Ok(total)
    }
}

fn finite_or(v: Complex64, point: &[f64]) -> Result<()> {
    if v.re.is_finite() && v.im.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "integrand",
            point: point.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_integrates_gaussian_moments() {
        let rule = Rule1d::standard_normal(20);
        assert!((rule.integrate(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!((rule.integrate(|x| x * x) - 1.0).abs() < 1e-13);
        assert!((rule.integrate(|x| x.powi(4)) - 3.0).abs() < 1e-12);
        assert!(rule.integrate(|x| x.powi(3)).abs() < 1e-13);
    }

    #[test]
    fn hermite_is_stable_at_high_order() {
        let rule = Rule1d::standard_normal(120);
        assert!((rule.integrate(|_| 1.0) - 1.0).abs() < 1e-13);
        // E[cos x] = exp(-1/2)
        assert!((rule.integrate(f64::cos) - (-0.5f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = Rule1d::gauss_legendre(7);
        assert!((rule.integrate(|x| x.powi(12)) - 2.0 / 13.0).abs() < 1e-14);
        let c = Rule1d::composite_legendre(0.0, 3.0, 5, 4);
        assert!((c.integrate(|x| x * x) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_integration_reports_bad_point() {
        let rule = TensorRule::isotropic(Rule1d::gauss_legendre(3), 2);
        let err = rule
            .integrate(|x| Complex64::new(if x[1] > 0.5 { f64::NAN } else { 1.0 }, 0.0))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn tensor_sum_matches_product_of_factors() {
        let rule = TensorRule::isotropic(Rule1d::standard_normal(12), 3);
        let v = rule
            .integrate(|x| Complex64::new(x[0] * x[0] * x[1] * x[1] + x[2], 0.0))
            .unwrap();
        assert!((v.re - 1.0).abs() < 1e-13);
        assert_eq!(rule.point_count(), 12 * 12 * 12);
    }
}

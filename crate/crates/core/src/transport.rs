//! Flows `S_k(t) x = x - t k(x)`, pushforwards of density measures along
//! them, and the finite-difference weak-derivative oracle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::fd;
use crate::measure::{log_derivative_along_field, DensityMeasure, MeasureKind, TestFunction, VectorField};
use crate::pairing::{pair, pair_fn, PairingEngine, PairingMode, PairingValue};
use crate::quadrature::{Rule1d, TensorRule};

/// Default central-difference step for weak derivatives.
pub const DEFAULT_WEAK_STEP: f64 = 1e-4;

const PROBE_ORDER: usize = 12;
const BOX_PROBES_PER_AXIS: usize = 9;

/// Points on which flow injectivity is monitored for a given engine.
pub fn probe_grid(nu: &DensityMeasure, engine: &PairingEngine) -> Vec<Vec<f64>> {
    let dim = nu.dim();
    let mut points = Vec::new();
    match (&engine.mode, &engine.bounds) {
        (PairingMode::TensorGridQuadrature, Some(bounds)) => {
            let axes = bounds
                .iter()
                .map(|&(a, b)| {
                    let step = (b - a) / (BOX_PROBES_PER_AXIS - 1) as f64;
                    Rule1d {
                        nodes: (0..BOX_PROBES_PER_AXIS).map(|i| a + step * i as f64).collect(),
                        weights: vec![1.0; BOX_PROBES_PER_AXIS],
                    }
                })
                .collect();
            TensorRule::new(axes).for_each(|x, _| points.push(x.to_vec()));
        }
        _ => {
            let rule = TensorRule::isotropic(Rule1d::standard_normal(PROBE_ORDER), dim);
            let reference = nu.reference();
            rule.for_each(|z, _| points.push(reference.transform(z)));
        }
    }
    points
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// The map `x ↦ x - t k(x)`.
#[derive(Debug, Clone)]
pub struct Flow {
    pub field: VectorField,
    pub t: f64,
}

impl Flow {
    pub fn new(field: VectorField, t: f64) -> Self {
        Self { field, t }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.t == 0.0 {
            return x.to_vec();
        }
        let k = self.field.value(x);
        x.iter().zip(&k).map(|(xi, ki)| xi - self.t * ki).collect()
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.field.dim();
        DMatrix::identity(n, n) - self.field.jacobian(x) * self.t
    }

    /// `0.5 / max_x ||k'(x)||_2` over the probe points; infinite for constant fields.
    pub fn t_max(field: &VectorField, probes: &[Vec<f64>]) -> f64 {
        let worst = probes
            .iter()
            .map(|x| spectral_norm(&field.jacobian(x)))
            .fold(0.0, f64::max);
        if worst == 0.0 {
            f64::INFINITY
        } else {
            0.5 / worst
        }
    }

    /// Confirm `det(I - t k') > 0` on every probe.
    pub fn check_injective(&self, probes: &[Vec<f64>]) -> Result<()> {
        for x in probes {
            let det = self.jacobian(x).determinant();
            if !(det > 0.0) {
                return Err(Error::GraphCondition {
                    point: x.clone(),
                    det,
                });
            }
        }
        Ok(())
    }

    /// Solve `x - t k(x) = y` by Newton iteration started at `y`.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.t == 0.0 {
            return Ok(y.to_vec());
        }
        let mut x = DVector::from_column_slice(y);
        let target = DVector::from_column_slice(y);
        let mut residual = f64::INFINITY;
        for _ in 0..50 {
            let fx = DVector::from_vec(self.apply(x.as_slice())) - &target;
            residual = fx.amax();
            if residual <= 1e-14 * target.amax().max(1.0) {
                return Ok(x.as_slice().to_vec());
            }
            let step = self
                .jacobian(x.as_slice())
                .lu()
                .solve(&fx)
                .ok_or_else(|| Error::GraphCondition {
                    point: x.as_slice().to_vec(),
                    det: 0.0,
                })?;
            x -= step;
        }
        Err(Error::NewtonDivergence {
            point: y.to_vec(),
            iterations: 50,
            residual,
        })
    }
}

/// `(S_k(t))_* nu` as a density measure.
#[derive(Debug, Clone)]
pub struct PushforwardMeasure {
    pub base: DensityMeasure,
    pub flow: Flow,
}

impl PushforwardMeasure {
    pub fn new(base: DensityMeasure, flow: Flow) -> Result<Self> {
        check_dim("flow field", base.dim(), flow.field.dim())?;
        Ok(Self { base, flow })
    }

    /// `log rho(S^{-1} y) - log det S'(S^{-1} y)`; the base density itself at `t = 0`.
    pub fn pushed_log_density(&self, y: &[f64]) -> Result<f64> {
        if self.flow.t == 0.0 {
            return Ok(self.base.log_density(y));
        }
        let x = self.flow.inverse(y)?;
        let det = self.flow.jacobian(&x).determinant();
        if !(det > 0.0) {
            return Err(Error::GraphCondition { point: x, det });
        }
        Ok(self.base.log_density(&x) - det.ln())
    }

    /// The pushforward as a standalone measure. Its score is taken by central
    /// differences of the pushed log-density; inversion failures surface as
    /// non-finite values during pairing.
    pub fn to_density_measure(&self) -> DensityMeasure {
        let this = Arc::new(self.clone());
        let t1 = this.clone();
        let log_density = Arc::new(move |y: &[f64]| t1.pushed_log_density(y).unwrap_or(f64::NAN));
        let t2 = this;
        let gradient = Arc::new(move |y: &[f64]| {
            fd::gradient(|z| t2.pushed_log_density(z).unwrap_or(f64::NAN), y, 1e-5)
        });
        let kind = match (self.base.kind(), self.flow.field.constant_value()) {
            (MeasureKind::Flat, Some(_)) => MeasureKind::Flat,
            (MeasureKind::NormalizedProbability, _) => MeasureKind::NormalizedProbability,
            _ => MeasureKind::Unnormalized,
        };
        DensityMeasure::from_parts(
            self.base.dim(),
            kind,
            log_density,
            gradient,
            self.base.reference().clone(),
            format!("pushforward({})", self.base.label()),
        )
    }
}

/// `∫ phi(x - t k(x)) dnu(x)`, the pairing of `(S_k(t))_* nu` with `phi`.
pub fn pushforward_pairing(
    nu: &DensityMeasure,
    k: &VectorField,
    t: f64,
    phi: &TestFunction,
    engine: &PairingEngine,
) -> Result<PairingValue> {
    check_dim("vector field", nu.dim(), k.dim())?;
    check_dim("test function", nu.dim(), phi.dim())?;
    let probes = probe_grid(nu, engine);
    let t_max = Flow::t_max(k, &probes);
    if !(t.abs() < t_max) {
        return Err(Error::FlowOutOfRange { t, t_max });
    }
    let flow = Flow::new(k.clone(), t);
    flow.check_injective(&probes)?;
    pair_fn(nu, engine, |x| phi.value(&flow.apply(x)))
}

/// Central difference in `t` of [`pushforward_pairing`] at `t = 0`.
pub fn weak_derivative_fd(
    nu: &DensityMeasure,
    k: &VectorField,
    phi: &TestFunction,
    engine: &PairingEngine,
    step: f64,
) -> Result<Complex64> {
    fd::validate_step(step)?;
    let plus = pushforward_pairing(nu, k, step, phi, engine)?;
    let minus = pushforward_pairing(nu, k, -step, phi, engine)?;
    Ok((plus.value - minus.value) / (2.0 * step))
}

/// `<nu, phi * beta_k>`, the analytic counterpart of [`weak_derivative_fd`].
pub fn analytic_weak_derivative(
    nu: &DensityMeasure,
    k: &VectorField,
    phi: &TestFunction,
    engine: &PairingEngine,
) -> Result<Complex64> {
    check_dim("vector field", nu.dim(), k.dim())?;
    check_dim("test function", nu.dim(), phi.dim())?;
    let v = pair_fn(nu, engine, |x| {
        let beta = log_derivative_along_field(nu, k, x).unwrap_or(f64::NAN);
        phi.value(x) * beta
    })?;
    Ok(v.value)
}

/// `-<nu, <grad phi, k>>`, the integrated-by-parts form of the same derivative.
pub fn transport_weak_derivative(
    nu: &DensityMeasure,
    k: &VectorField,
    phi: &TestFunction,
    engine: &PairingEngine,
) -> Result<Complex64> {
    let v = pair_fn(nu, engine, |x| {
        let g = phi.gradient(x);
        let kx = k.value(x);
        -g.iter().zip(&kx).map(|(a, b)| a * b).sum::<Complex64>()
    })?;
    Ok(v.value)
}

/// Step-halving study of the weak-derivative oracle.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub steps: [f64; 3],
    pub estimates: [Complex64; 3],
    pub observed_order: Option<f64>,
    pub richardson: Complex64,
}

pub fn weak_derivative_convergence(
    nu: &DensityMeasure,
    k: &VectorField,
    phi: &TestFunction,
    engine: &PairingEngine,
    step: f64,
) -> Result<ConvergenceStudy> {
    let steps = [step, step / 2.0, step / 4.0];
    let mut estimates = [Complex64::new(0.0, 0.0); 3];
    for (e, s) in estimates.iter_mut().zip(steps) {
        *e = weak_derivative_fd(nu, k, phi, engine, s)?;
    }
    // differences of complex estimates: use the component with the larger signal
    let pick = |c: Complex64| if estimates[0].im.abs() > estimates[0].re.abs() { c.im } else { c.re };
    // cancellation in the central difference at the finest step sets the noise floor
    let scale = pair(nu, phi, engine)?.value.norm().max(pick(estimates[2]).abs());
    let floor = 1024.0 * f64::EPSILON * scale / steps[2];
    let observed_order = fd::observed_order_above(pick(estimates[0]), pick(estimates[1]), pick(estimates[2]), floor);
    let richardson = (estimates[2] * 4.0 - estimates[1]) / 3.0;
    Ok(ConvergenceStudy {
        steps,
        estimates,
        observed_order,
        richardson,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeComparison {
    pub probe: String,
    pub oracle: Complex64,
    pub analytic: Complex64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadonNikodymReport {
    pub comparisons: Vec<ProbeComparison>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Certify that the derivative of `nu` along `k` has density `beta_k` with
/// respect to `nu` by comparing both sides on every probe.
pub fn radon_nikodym_check(
    nu: &DensityMeasure,
    k: &VectorField,
    probes: &[TestFunction],
    engine: &PairingEngine,
    step: f64,
    tol: f64,
) -> Result<RadonNikodymReport> {
    if probes.is_empty() {
        return Err(Error::Invalid("radon-nikodym check needs at least one probe".into()));
    }
    let comparisons = probes
        .iter()
        .map(|phi| {
            let oracle = weak_derivative_fd(nu, k, phi, engine, step)?;
            let analytic = analytic_weak_derivative(nu, k, phi, engine)?;
            let abs_err = (oracle - analytic).norm();
            Ok(ProbeComparison {
                probe: phi.label().to_string(),
                oracle,
                analytic,
                abs_err,
                rel_err: abs_err / analytic.norm().max(1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = comparisons.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(RadonNikodymReport {
        comparisons,
        max_rel_err,
        tol,
        pass: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Monomial;

    #[test]
    fn flow_is_identity_at_zero() {
        let flow = Flow::new(VectorField::identity(2), 0.0);
        assert_eq!(flow.apply(&[1.5, -2.0]), vec![1.5, -2.0]);
    }

    #[test]
    fn shifted_gaussian_mean() {
        let nu = DensityMeasure::standard_gaussian(1);
        let k = VectorField::constant(vec![1.0]);
        let phi = TestFunction::coordinate_power(1, 0, 1);
        let v = pushforward_pairing(&nu, &k, 0.1, &phi, &PairingEngine::gauss_hermite(20)).unwrap();
        assert!((v.value.re + 0.1).abs() < 1e-14);
    }

    #[test]
    fn contracted_second_moment() {
        let nu = DensityMeasure::standard_gaussian(2);
        let phi = TestFunction::coordinate_power(2, 0, 2);
        let v = pushforward_pairing(&nu, &VectorField::identity(2), 0.1, &phi, &PairingEngine::gauss_hermite(20)).unwrap();
        assert!((v.value.re - 0.81).abs() < 1e-13);
    }

    #[test]
    fn pairing_at_zero_is_plain_pairing() {
        let nu = DensityMeasure::standard_gaussian(2);
        let phi = TestFunction::plane_wave(vec![0.3, 0.8]);
        let engine = PairingEngine::gauss_hermite(24);
        let a = pushforward_pairing(&nu, &VectorField::identity(2), 0.0, &phi, &engine).unwrap();
        let b = crate::pairing::pair(&nu, &phi, &engine).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn flow_beyond_bound_is_rejected() {
        let nu = DensityMeasure::standard_gaussian(1);
        let phi = TestFunction::constant(1, 1.0);
        let err = pushforward_pairing(&nu, &VectorField::identity(1), 0.6, &phi, &PairingEngine::gauss_hermite(8)).unwrap_err();
        assert!(matches!(err, Error::FlowOutOfRange { .. }));
        let err = weak_derivative_fd(&nu, &VectorField::identity(1), &phi, &PairingEngine::gauss_hermite(8), 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidStep(_)));
    }

    #[test]
    fn weak_derivative_of_mean_along_constant_field() {
        let nu = DensityMeasure::standard_gaussian(1);
        let k = VectorField::constant(vec![1.0]);
        let phi = TestFunction::coordinate_power(1, 0, 1);
        let d = weak_derivative_fd(&nu, &k, &phi, &PairingEngine::gauss_hermite(20), 1e-4).unwrap();
        assert!((d.re + 1.0).abs() < 1e-7);
    }

    #[test]
    fn mass_is_conserved_to_first_order() {
        let nu = DensityMeasure::standard_gaussian(2);
        let d = weak_derivative_fd(
            &nu,
            &VectorField::identity(2),
            &TestFunction::constant(2, 1.0),
            &PairingEngine::gauss_hermite(20),
            1e-4,
        )
        .unwrap();
        assert!(d.norm() < 1e-8);
    }

    #[test]
    fn radon_nikodym_identity_field() {
        let nu = DensityMeasure::standard_gaussian(1);
        let probes = vec![
            TestFunction::constant(1, 1.0),
            TestFunction::coordinate_power(1, 0, 1),
            TestFunction::coordinate_power(1, 0, 2),
        ];
        let report = radon_nikodym_check(&nu, &VectorField::identity(1), &probes, &PairingEngine::gauss_hermite(20), 1e-4, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.comparisons.len(), 3);
    }

    #[test]
    fn radon_nikodym_zero_field() {
        let nu = DensityMeasure::standard_gaussian(1);
        let probes = vec![TestFunction::coordinate_power(1, 0, 2)];
        let report = radon_nikodym_check(&nu, &VectorField::constant(vec![0.0]), &probes, &PairingEngine::gauss_hermite(20), 1e-4, 1e-12).unwrap();
        assert!(report.pass);
        assert_eq!(report.comparisons[0].oracle.norm(), 0.0);
    }

    #[test]
    fn radon_nikodym_rejects_empty_probe_set() {
        let nu = DensityMeasure::standard_gaussian(1);
        assert!(radon_nikodym_check(&nu, &VectorField::identity(1), &[], &PairingEngine::gauss_hermite(4), 1e-4, 1e-6).is_err());
    }

    #[test]
    fn constant_field_pushforward_is_translation() {
        let base = DensityMeasure::gaussian(&[0.2], &DMatrix::from_element(1, 1, 1.5)).unwrap();
        let h = 0.7;
        let t = 0.3;
        let push = PushforwardMeasure::new(base.clone(), Flow::new(VectorField::constant(vec![h]), t)).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=80 {
            let y = -4.0 + 0.1 * i as f64;
            let a = push.pushed_log_density(&[y]).unwrap().exp();
            let b = base.density(&[y + t * h]);
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-12, "sup difference {worst}");
    }

    #[test]
    fn pushforward_at_zero_is_exactly_base() {
        let base = DensityMeasure::standard_gaussian(2);
        let push = PushforwardMeasure::new(base.clone(), Flow::new(VectorField::identity(2), 0.0)).unwrap();
        for p in fd::probe_points(2, 20, 3.0) {
            assert_eq!(push.pushed_log_density(&p).unwrap().to_bits(), base.log_density(&p).to_bits());
        }
    }

    #[test]
    fn pushforward_preserves_mass() {
        let base = DensityMeasure::standard_gaussian(2);
        let field = VectorField::new(
            2,
            Arc::new(|x: &[f64]| vec![0.3 * x[1].sin() + 0.2 * x[0], 0.25 * x[0].cos()]),
            Arc::new(|x: &[f64]| DMatrix::from_row_slice(2, 2, &[0.2, 0.3 * x[1].cos(), -0.25 * x[0].sin(), 0.0])),
            Default::default(),
        )
        .unwrap();
        let engine = PairingEngine::gauss_hermite(40);
        let one = TestFunction::constant(2, 1.0);
        for t in [-0.2, 0.1, 0.3] {
            let push = PushforwardMeasure::new(base.clone(), Flow::new(field.clone(), t)).unwrap();
            let mass = crate::pairing::pair(&push.to_density_measure(), &one, &engine).unwrap();
            assert!((mass.value.re - 1.0).abs() < 1e-8, "t={t}: {}", mass.value.re);
        }
    }

    #[test]
    fn integration_by_parts_identity() {
        let nu = DensityMeasure::standard_gaussian(2);
        let k = VectorField::linear(DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.3, 0.2])).unwrap();
        let phi = TestFunction::polynomial_times_gaussian(
            vec![Monomial::new(1.0, vec![1, 0]), Monomial::new(0.5, vec![1, 2])],
            vec![0.3, 0.1],
            Some(1.2),
        )
        .unwrap();
        let engine = PairingEngine::gauss_hermite(40);
        let a = analytic_weak_derivative(&nu, &k, &phi, &engine).unwrap();
        let b = transport_weak_derivative(&nu, &k, &phi, &engine).unwrap();
        assert!((a - b).norm() < 1e-12);
    }
}

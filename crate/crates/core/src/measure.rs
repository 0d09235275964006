//! Density measures on `R^n`, test functions, vector fields and the
//! logarithmic derivatives of a measure along vectors and fields.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fd::{self, FdConfig};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type ComplexFn = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;
pub type ComplexVectorFn = Arc<dyn Fn(&[f64]) -> Vec<Complex64> + Send + Sync>;
pub type DrawFn = Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>;

/// Number of deterministic probe points used when validating analytic derivatives.
const VALIDATION_PROBES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    NormalizedProbability,
    Unnormalized,
    /// Translation-invariant: constant density, vanishing score.
    Flat,
}

/// Exact sampler for a measure together with its total mass.
#[derive(Clone)]
pub struct Sampler {
    pub draw: DrawFn,
    pub log_mass: f64,
}

/// Gaussian `N(mean, L L^T)` that Gauss–Hermite pairings are built around.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianReference {
    pub mean: DVector<f64>,
    pub cholesky: DMatrix<f64>,
}

impl GaussianReference {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cholesky: DMatrix::identity(dim, dim),
        }
    }

    pub fn new(mean: &[f64], covariance: &DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        check_dim("covariance rows", dim, covariance.nrows())?;
        check_dim("covariance columns", dim, covariance.ncols())?;
        let chol = covariance.clone().cholesky().ok_or_else(|| {
            Error::Invalid("covariance is not symmetric positive definite".into())
        })?;
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            cholesky: chol.l(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_det_cholesky(&self) -> f64 {
        self.cholesky.diagonal().iter().map(|d| d.ln()).sum()
    }

    /// Map standard-normal coordinates to the reference.
    pub fn transform(&self, standard: &[f64]) -> Vec<f64> {
        let z = DVector::from_column_slice(standard);
        (&self.mean + &self.cholesky * z).as_slice().to_vec()
    }
}

/// A measure `exp(log_density(x)) dx` on `R^dim`.
#[derive(Clone)]
pub struct DensityMeasure {
    dim: usize,
    log_density: ScalarFn,
    log_density_gradient: VectorFn,
    kind: MeasureKind,
    sampler: Option<Sampler>,
    reference: GaussianReference,
    label: String,
}

impl fmt::Debug for DensityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityMeasure")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("has_sampler", &self.sampler.is_some())
            .finish()
    }
}

impl DensityMeasure {
    /// Build a measure from an analytic log-density and its gradient.
    ///
    /// The gradient is checked against central differences at a handful of
    /// deterministic probe points before the measure is returned.
    pub fn from_log_density(
        dim: usize,
        kind: MeasureKind,
        log_density: ScalarFn,
        log_density_gradient: VectorFn,
        fd: FdConfig,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("measure dimension must be positive".into()));
        }
        let measure = Self {
            dim,
            log_density,
            log_density_gradient,
            kind,
            sampler: None,
            reference: GaussianReference::standard(dim),
            label: "custom".into(),
        };
        if kind == MeasureKind::Flat {
            measure.check_flat()?;
        }
        measure.validate_gradient(fd)?;
        Ok(measure)
    }

    pub(crate) fn from_parts(
        dim: usize,
        kind: MeasureKind,
        log_density: ScalarFn,
        log_density_gradient: VectorFn,
        reference: GaussianReference,
        label: String,
    ) -> Self {
        Self {
            dim,
            log_density,
            log_density_gradient,
            kind,
            sampler: None,
            reference,
            label,
        }
    }

    /// `N(mean, covariance)`, normalized, with an exact sampler.
    pub fn gaussian(mean: &[f64], covariance: &DMatrix<f64>) -> Result<Self> {
        let reference = GaussianReference::new(mean, covariance)?;
        let dim = mean.len();
        let precision = covariance
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Invalid("covariance is singular".into()))?;
        let mean_v = DVector::from_column_slice(mean);
        let log_norm = -0.5 * dim as f64 * (2.0 * PI).ln() - reference.log_det_cholesky();

        let (p1, m1) = (precision.clone(), mean_v.clone());
        let log_density: ScalarFn = Arc::new(move |x: &[f64]| {
            let d = DVector::from_column_slice(x) - &m1;
            log_norm - 0.5 * d.dot(&(&p1 * &d))
        });
        let (p2, m2) = (precision, mean_v);
        let gradient: VectorFn = Arc::new(move |x: &[f64]| {
            let d = DVector::from_column_slice(x) - &m2;
            (-(&p2 * d)).as_slice().to_vec()
        });
        let r = reference.clone();
        let draw: DrawFn = Arc::new(move |rng: &mut dyn RngCore| {
            let z: Vec<f64> = (0..r.dim())
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect();
            r.transform(&z)
        });
        Ok(Self {
            dim,
            log_density,
            log_density_gradient: gradient,
            kind: MeasureKind::NormalizedProbability,
            sampler: Some(Sampler { draw, log_mass: 0.0 }),
            reference,
            label: "gaussian".into(),
        })
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        Self::gaussian(&vec![0.0; dim], &DMatrix::identity(dim, dim))
            .expect("identity covariance is positive definite")
    }

    /// Lebesgue measure on `R^dim` (density 1).
    pub fn flat(dim: usize) -> Self {
        Self::flat_with_level(dim, 1.0)
    }

    /// Constant density `level > 0`; the finite-dimensional stand-in for a
    /// translation-invariant pseudomeasure.
    pub fn flat_with_level(dim: usize, level: f64) -> Self {
        assert!(level > 0.0 && level.is_finite(), "flat level must be positive");
        let log_level = level.ln();
        Self {
            dim,
            log_density: Arc::new(move |_| log_level),
            log_density_gradient: Arc::new(move |x: &[f64]| vec![0.0; x.len()]),
            kind: MeasureKind::Flat,
            sampler: None,
            reference: GaussianReference::standard(dim),
            label: "flat".into(),
        }
    }

    /// Multiply the density by `factor > 0`. The gradient closure is shared,
    /// so every logarithmic derivative is unchanged bit for bit.
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor > 0.0 && factor.is_finite(), "scale factor must be positive");
        let shift = factor.ln();
        let inner = self.log_density.clone();
        let kind = match self.kind {
            MeasureKind::Flat => MeasureKind::Flat,
            _ => MeasureKind::Unnormalized,
        };
        Self {
            log_density: Arc::new(move |x| inner(x) + shift),
            kind,
            sampler: self.sampler.as_ref().map(|s| Sampler {
                draw: s.draw.clone(),
                log_mass: s.log_mass + shift,
            }),
            label: format!("{}*{factor}", self.label),
            ..self.clone()
        }
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = Some(sampler);
        self
    }

    /// Gaussian around which Gauss–Hermite pairings are centered.
    pub fn with_reference(mut self, reference: GaussianReference) -> Result<Self> {
        check_dim("reference dimension", self.dim, reference.dim())?;
        self.reference = reference;
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn sampler(&self) -> Option<&Sampler> {
        self.sampler.as_ref()
    }

    pub fn reference(&self) -> &GaussianReference {
        &self.reference
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        (self.log_density)(x)
    }

    pub fn log_density_gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.log_density_gradient)(x)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    fn check_flat(&self) -> Result<()> {
        let probes = fd::probe_points(self.dim, VALIDATION_PROBES, 3.0);
        let level = self.log_density(&probes[0]);
        for p in &probes {
            if self.log_density(p) != level || self.log_density_gradient(p).iter().any(|g| *g != 0.0) {
                return Err(Error::Invalid(
                    "flat measure must have constant log-density and zero gradient".into(),
                ));
            }
        }
        Ok(())
    }

    /// Compare the analytic score with central differences of the log-density.
    pub fn validate_gradient(&self, fd: FdConfig) -> Result<()> {
        for p in fd::probe_points(self.dim, VALIDATION_PROBES, 1.5) {
            let analytic = self.log_density_gradient(&p);
            check_dim("log-density gradient", self.dim, analytic.len())?;
            let numeric = fd::gradient(|x| self.log_density(x), &p, fd.step);
            let err = fd::max_rel_err(&analytic, &numeric);
            if !err.is_finite() || err > fd.tol {
                return Err(Error::DerivativeMismatch {
                    what: "log-density gradient",
                    point: p,
                    rel_err: err,
                    tol: fd.tol,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFamily {
    PolynomialTimesGaussian,
    CompactBump,
    PlaneWave,
}

/// A smooth (possibly complex) function paired against measures.
#[derive(Clone)]
pub struct TestFunction {
    dim: usize,
    value: ComplexFn,
    gradient: ComplexVectorFn,
    family: TestFamily,
    // `(amplitude, frequency)` when the function is `amplitude * exp(i <frequency, x>)`
    wave: Option<(f64, Arc<Vec<f64>>)>,
    label: String,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("family", &self.family)
            .finish()
    }
}

/// One monomial `coefficient * prod_i x_i^{powers[i]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coefficient: f64, powers: Vec<u32>) -> Self {
        Self {
            coefficient,
            powers,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.powers
            .iter()
            .zip(x)
            .fold(self.coefficient, |acc, (&k, &xi)| acc * xi.powi(k as i32))
    }

    fn partial(&self, x: &[f64], axis: usize) -> f64 {
        let k = self.powers[axis];
        if k == 0 {
            return 0.0;
        }
        self.powers
            .iter()
            .zip(x)
            .enumerate()
            .fold(self.coefficient * k as f64, |acc, (i, (&p, &xi))| {
                if i == axis {
                    acc * xi.powi(p as i32 - 1)
                } else {
                    acc * xi.powi(p as i32)
                }
            })
    }
}

impl TestFunction {
    /// `P(x) * exp(-|x - center|^2 / (2 width^2))`; `width = None` drops the envelope.
    pub fn polynomial_times_gaussian(
        terms: Vec<Monomial>,
        center: Vec<f64>,
        width: Option<f64>,
    ) -> Result<Self> {
        let dim = center.len();
        for t in &terms {
            check_dim("monomial powers", dim, t.powers.len())?;
        }
        if let Some(w) = width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Invalid(format!("gaussian width must be positive, got {w}")));
            }
        }
        let terms = Arc::new(terms);
        let center = Arc::new(center);
        let inv_w2 = width.map_or(0.0, |w| 1.0 / (w * w));
        let envelope = {
            let center = center.clone();
            move |x: &[f64]| {
                if inv_w2 == 0.0 {
                    return 1.0;
                }
                let r2: f64 = x.iter().zip(center.iter()).map(|(a, c)| (a - c) * (a - c)).sum();
                (-0.5 * r2 * inv_w2).exp()
            }
        };
        let (t1, e1) = (terms.clone(), envelope.clone());
        let value: ComplexFn = Arc::new(move |x: &[f64]| {
            let p: f64 = t1.iter().map(|t| t.eval(x)).sum();
            Complex64::new(p * e1(x), 0.0)
        });
        let (t2, e2, c2) = (terms, envelope, center);
        let gradient: ComplexVectorFn = Arc::new(move |x: &[f64]| {
            let env = e2(x);
            let p: f64 = t2.iter().map(|t| t.eval(x)).sum();
            (0..x.len())
                .map(|i| {
                    let dp: f64 = t2.iter().map(|t| t.partial(x, i)).sum();
                    Complex64::new((dp - p * (x[i] - c2[i]) * inv_w2) * env, 0.0)
                })
                .collect()
        });
        Ok(Self {
            dim,
            value,
            gradient,
            family: TestFamily::PolynomialTimesGaussian,
            wave: None,
            label: "poly*gauss".into(),
        })
    }

    pub fn polynomial(dim: usize, terms: Vec<Monomial>) -> Result<Self> {
        Ok(Self::polynomial_times_gaussian(terms, vec![0.0; dim], None)?.with_label("poly"))
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut f = Self::polynomial(dim, vec![Monomial::new(c, vec![0; dim])])
            .expect("constant monomial is well formed")
            .with_label(format!("const({c})"));
        f.wave = Some((c, Arc::new(vec![0.0; dim])));
        f
    }

    /// `x_axis^power` as a pure polynomial.
    pub fn coordinate_power(dim: usize, axis: usize, power: u32) -> Self {
        let mut powers = vec![0; dim];
        powers[axis] = power;
        Self::polynomial(dim, vec![Monomial::new(1.0, powers)])
            .expect("monomial is well formed")
            .with_label(format!("x{}^{power}", axis + 1))
    }

    /// Smooth bump `exp(-1 / (1 - |x - c|^2 / R^2))` supported in the ball of radius `R`.
    pub fn compact_bump(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Invalid(format!("bump radius must be positive, got {radius}")));
        }
        let dim = center.len();
        let center = Arc::new(center);
        let inv_r2 = 1.0 / (radius * radius);
        let c1 = center.clone();
        let value: ComplexFn = Arc::new(move |x: &[f64]| {
            let s = x.iter().zip(c1.iter()).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() * inv_r2;
            if s >= 1.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new((-1.0 / (1.0 - s)).exp(), 0.0)
            }
        });
        let c2 = center;
        let gradient: ComplexVectorFn = Arc::new(move |x: &[f64]| {
            let s = x.iter().zip(c2.iter()).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() * inv_r2;
            if s >= 1.0 {
                return vec![Complex64::new(0.0, 0.0); x.len()];
            }
            let one_minus = 1.0 - s;
            let v = (-1.0 / one_minus).exp();
            let factor = -v / (one_minus * one_minus) * 2.0 * inv_r2;
            x.iter()
                .zip(c2.iter())
                .map(|(a, c)| Complex64::new(factor * (a - c), 0.0))
                .collect()
        });
        Ok(Self {
            dim,
            value,
            gradient,
            family: TestFamily::CompactBump,
            wave: None,
            label: "bump".into(),
        })
    }

    /// `exp(i <frequency, x>)`.
    pub fn plane_wave(frequency: Vec<f64>) -> Self {
        let dim = frequency.len();
        let freq = Arc::new(frequency);
        let f1 = freq.clone();
        let value: ComplexFn = Arc::new(move |x: &[f64]| {
            let phase: f64 = x.iter().zip(f1.iter()).map(|(a, w)| a * w).sum();
            Complex64::from_polar(1.0, phase)
        });
        let f2 = freq.clone();
        let gradient: ComplexVectorFn = Arc::new(move |x: &[f64]| {
            let phase: f64 = x.iter().zip(f2.iter()).map(|(a, w)| a * w).sum();
            let v = Complex64::from_polar(1.0, phase);
            f2.iter().map(|w| Complex64::new(0.0, *w) * v).collect()
        });
        Self {
            dim,
            value,
            gradient,
            family: TestFamily::PlaneWave,
            wave: Some((1.0, freq)),
            label: "plane-wave".into(),
        }
    }

    /// Arbitrary test function; the gradient is validated against finite differences.
    pub fn custom(
        dim: usize,
        family: TestFamily,
        value: ComplexFn,
        gradient: ComplexVectorFn,
        fd: FdConfig,
    ) -> Result<Self> {
        let f = Self {
            dim,
            value,
            gradient,
            family,
            wave: None,
            label: "custom".into(),
        };
        f.validate_gradient(fd)?;
        Ok(f)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(amplitude, frequency)` if this is `amplitude * exp(i <frequency, x>)`.
    pub fn wave_data(&self) -> Option<(f64, &[f64])> {
        self.wave.as_ref().map(|(a, w)| (*a, w.as_slice()))
    }

    pub fn family(&self) -> TestFamily {
        self.family
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, x: &[f64]) -> Complex64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<Complex64> {
        (self.gradient)(x)
    }

    pub fn validate_gradient(&self, fd: FdConfig) -> Result<()> {
        for p in fd::probe_points(self.dim, VALIDATION_PROBES, 1.5) {
            let analytic = self.gradient(&p);
            check_dim("test function gradient", self.dim, analytic.len())?;
            let numeric = fd::gradient_c(|x| self.value(x), &p, fd.step);
            let err = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| fd::rel_err_c(*a, *b))
                .fold(0.0, f64::max);
            if !err.is_finite() || err > fd.tol {
                return Err(Error::DerivativeMismatch {
                    what: "test function gradient",
                    point: p,
                    rel_err: err,
                    tol: fd.tol,
                });
            }
        }
        Ok(())
    }
}

/// A smooth vector field `k: R^n -> R^n` with its Jacobian `k'`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    value: VectorFn,
    jacobian: MatrixFn,
    constant: Option<Vec<f64>>,
    label: String,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("constant", &self.constant)
            .finish()
    }
}

impl VectorField {
    pub fn new(dim: usize, value: VectorFn, jacobian: MatrixFn, fd: FdConfig) -> Result<Self> {
        let field = Self {
            dim,
            value,
            jacobian,
            constant: None,
            label: "custom".into(),
        };
        field.validate_jacobian(fd)?;
        Ok(field)
    }

    /// Unvalidated field; callers guarantee the Jacobian is consistent.
    pub(crate) fn from_parts(dim: usize, value: VectorFn, jacobian: MatrixFn, label: String) -> Self {
        Self {
            dim,
            value,
            jacobian,
            constant: None,
            label,
        }
    }

    /// Field whose Jacobian is assembled by central differences of `value`.
    pub fn from_value_fd(dim: usize, value: VectorFn, step: f64) -> Self {
        let v = value.clone();
        Self {
            dim,
            value,
            jacobian: Arc::new(move |x: &[f64]| fd::jacobian(|y| v(y), x, step)),
            constant: None,
            label: "fd-jacobian".into(),
        }
    }

    /// `k_h(x) = h`, Jacobian identically zero.
    pub fn constant(h: Vec<f64>) -> Self {
        let dim = h.len();
        let h1 = h.clone();
        Self {
            dim,
            value: Arc::new(move |_| h1.clone()),
            jacobian: Arc::new(move |_| DMatrix::zeros(dim, dim)),
            constant: Some(h),
            label: "constant".into(),
        }
    }

    /// `k(x) = A x`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        check_dim("linear field columns", a.nrows(), a.ncols())?;
        let dim = a.nrows();
        let a1 = a.clone();
        Ok(Self {
            dim,
            value: Arc::new(move |x: &[f64]| (&a1 * DVector::from_column_slice(x)).as_slice().to_vec()),
            jacobian: Arc::new(move |_| a.clone()),
            constant: None,
            label: "linear".into(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(DMatrix::identity(dim, dim))
            .expect("identity is square")
            .with_label("identity")
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        (self.value)(x)
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        (self.jacobian)(x)
    }

    pub fn constant_value(&self) -> Option<&[f64]> {
        self.constant.as_deref()
    }

    pub fn validate_jacobian(&self, fd: FdConfig) -> Result<()> {
        for p in fd::probe_points(self.dim, VALIDATION_PROBES, 1.5) {
            let analytic = self.jacobian(&p);
            check_dim("jacobian rows", self.dim, analytic.nrows())?;
            check_dim("jacobian columns", self.dim, analytic.ncols())?;
            let numeric = fd::jacobian(|x| self.value(x), &p, fd.step);
            let err = fd::max_rel_err_matrix(&analytic, &numeric);
            if !err.is_finite() || err > fd.tol {
                return Err(Error::DerivativeMismatch {
                    what: "vector field jacobian",
                    point: p,
                    rel_err: err,
                    tol: fd.tol,
                });
            }
        }
        Ok(())
    }
}

/// Score of `nu` in direction `h`: `<grad log rho(x), h>`; exactly zero for flat measures.
pub fn log_derivative_along_vector(nu: &DensityMeasure, h: &[f64], x: &[f64]) -> Result<f64> {
    check_dim("direction", nu.dim(), h.len())?;
    check_dim("point", nu.dim(), x.len())?;
    if !nu.log_density(x).is_finite() {
        return Err(Error::NonFinite {
            what: "log-density",
            point: x.to_vec(),
        });
    }
    if nu.kind() == MeasureKind::Flat {
        return Ok(0.0);
    }
    let grad = nu.log_density_gradient(x);
    Ok(grad.iter().zip(h).map(|(g, v)| g * v).sum())
}

/// Logarithmic derivative along a field: `beta(k(x), x) + tr k'(x)`.
pub fn log_derivative_along_field(nu: &DensityMeasure, k: &VectorField, x: &[f64]) -> Result<f64> {
    check_dim("vector field", nu.dim(), k.dim())?;
    if let Some(h) = k.constant_value() {
        return log_derivative_along_vector(nu, h, x);
    }
    let jac = k.jacobian(x);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "jacobian entry",
            point: x.to_vec(),
        });
    }
    let trace = jac.trace();
    if nu.kind() == MeasureKind::Flat {
        check_dim("point", nu.dim(), x.len())?;
        return Ok(trace);
    }
    let score = log_derivative_along_vector(nu, &k.value(x), x)?;
    Ok(score + trace)
}

//! Python bindings: measures, fields, test functions, pairings, weak
//! derivatives, Fresnel pairings, path-space anomalies and the scenario runner.
//!
//! Scenario and builtin specs cross the boundary as plain dicts, using the
//! same field names as the TOML configuration files.

use std::sync::Arc;

use logderiv::noether::TransformationFamily;
use logderiv::pathspace::{
    anomaly_term, desk_generator, fresnel_closed_form, fresnel_contour_quadrature, FeynmanWeight, InitialData,
    LatticePathSpace, QuadraticAction,
};
use logderiv::scenario::{self, CatalogKind, RunError, RunOptions, ScenarioConfig, VariantSelection};
use logderiv::{transport, DensityMeasure, Monomial, PairingEngine, TestFunction, VectorField};
use nalgebra::DMatrix;
use num_complex::Complex64;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn err(e: logderiv::Error) -> PyErr {
    if e.probe_point().is_some() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Measure", module = "logderiv", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMeasure(DensityMeasure);

#[pymethods]
impl PyMeasure {
    /// Gaussian with the given mean; identity covariance when omitted.
    #[staticmethod]
    #[pyo3(signature = (mean, covariance=None))]
    fn gaussian(mean: Vec<f64>, covariance: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let cov = match covariance {
            Some(c) => matrix(c)?,
            None => DMatrix::identity(mean.len(), mean.len()),
        };
        DensityMeasure::gaussian(&mean, &cov).map(Self).map_err(err)
    }

    #[staticmethod]
    fn flat(dim: usize) -> Self {
        Self(DensityMeasure::flat(dim))
    }

    /// Build from a builtin spec such as `{"builtin": "quartic-well", "dim": 1}`.
    #[staticmethod]
    fn from_spec(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        scenario::build_measure(&from_py(spec)?).map(Self).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label().to_string()
    }

    fn scaled(&self, factor: f64) -> Self {
        Self(self.0.scaled(factor))
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.0.log_density(&x))
    }

    fn log_density_gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(self.0.log_density_gradient(&x))
    }

    /// Logarithmic derivative along the constant direction `h` at `x`.
    fn log_derivative(&self, h: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        logderiv::log_derivative_along_vector(&self.0, &h, &x).map_err(err)
    }

    /// Logarithmic derivative along a vector field, including its divergence.
    fn log_derivative_along_field(&self, field: &PyField, x: Vec<f64>) -> PyResult<f64> {
        logderiv::log_derivative_along_field(&self.0, &field.0, &x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Measure({}, dim={})", self.0.label(), self.0.dim())
    }
}

impl PyMeasure {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() == self.0.dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("point has length {}, measure dimension is {}", x.len(), self.0.dim())))
        }
    }
}

#[pyclass(name = "Field", module = "logderiv", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyField(VectorField);

#[pymethods]
impl PyField {
    #[staticmethod]
    fn constant(h: Vec<f64>) -> Self {
        Self(VectorField::constant(h))
    }

    /// `x -> A x`.
    #[staticmethod]
    fn linear(a: Vec<Vec<f64>>) -> PyResult<Self> {
        VectorField::linear(matrix(a)?).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self(VectorField::identity(dim))
    }

    #[staticmethod]
    fn from_spec(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        scenario::build_field(&from_py(spec)?).map(Self).map_err(err)
    }

    /// Desk generator on a one-dimensional lattice path space with `steps` steps.
    #[staticmethod]
    fn desk_generator(steps: usize) -> PyResult<Self> {
        let space = LatticePathSpace::new(1, steps, 1.0).map_err(err)?;
        Ok(Self(desk_generator(&space)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(self.0.value(&x))
    }

    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.check(&x)?;
        Ok(rows(&self.0.jacobian(&x)))
    }

    fn __repr__(&self) -> String {
        format!("Field({}, dim={})", self.0.label(), self.0.dim())
    }
}

impl PyField {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() == self.0.dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("point has length {}, field dimension is {}", x.len(), self.0.dim())))
        }
    }
}

#[pyclass(name = "TestFunction", module = "logderiv", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTestFunction(TestFunction);

#[pymethods]
impl PyTestFunction {
    #[staticmethod]
    fn plane_wave(frequency: Vec<f64>) -> Self {
        Self(TestFunction::plane_wave(frequency))
    }

    /// `terms` is a list of `(coefficient, powers)` pairs.
    #[staticmethod]
    #[pyo3(signature = (terms, center, width=None))]
    fn polynomial_times_gaussian(terms: Vec<(f64, Vec<u32>)>, center: Vec<f64>, width: Option<f64>) -> PyResult<Self> {
        let terms = terms.into_iter().map(|(c, p)| Monomial::new(c, p)).collect();
        TestFunction::polynomial_times_gaussian(terms, center, width).map(Self).map_err(err)
    }

    #[staticmethod]
    fn compact_bump(center: Vec<f64>, radius: f64) -> PyResult<Self> {
        TestFunction::compact_bump(center, radius).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_spec(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        scenario::build_test_function(&from_py(spec)?).map(Self).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: Vec<f64>) -> PyResult<Complex64> {
        self.check(&x)?;
        Ok(self.0.value(&x))
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<Complex64>> {
        self.check(&x)?;
        Ok(self.0.gradient(&x))
    }

    fn __repr__(&self) -> String {
        format!("TestFunction({}, dim={})", self.0.label(), self.0.dim())
    }
}

impl PyTestFunction {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() == self.0.dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("point has length {}, test function dimension is {}", x.len(), self.0.dim())))
        }
    }
}

#[pyclass(name = "Engine", module = "logderiv", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEngine(PairingEngine);

#[pymethods]
impl PyEngine {
    #[staticmethod]
    fn gauss_hermite(order: usize) -> Self {
        Self(PairingEngine::gauss_hermite(order))
    }

    /// Composite Gauss-Legendre on a box given as `[(lo, hi), ...]`.
    #[staticmethod]
    fn tensor_grid(bounds: Vec<(f64, f64)>, panels: usize, order: usize) -> Self {
        Self(PairingEngine::tensor_grid(bounds, panels, order))
    }

    #[staticmethod]
    #[pyo3(signature = (samples, seed, workers=1))]
    fn monte_carlo(samples: usize, seed: u64, workers: usize) -> Self {
        Self(PairingEngine::monte_carlo(samples, seed, workers))
    }

    fn __repr__(&self) -> String {
        format!("Engine({:?})", self.0.mode)
    }
}

/// `<measure, phi>` as `(value, std_error)`; the error is `None` for quadrature.
#[pyfunction]
fn pair(measure: &PyMeasure, phi: &PyTestFunction, engine: &PyEngine) -> PyResult<(Complex64, Option<f64>)> {
    let v = logderiv::pair(&measure.0, &phi.0, &engine.0).map_err(err)?;
    Ok((v.value, v.std_error))
}

/// Pairing of the measure pushed forward by the flow `x -> x - t k(x)`.
#[pyfunction]
fn pushforward_pairing(measure: &PyMeasure, field: &PyField, t: f64, phi: &PyTestFunction, engine: &PyEngine) -> PyResult<Complex64> {
    transport::pushforward_pairing(&measure.0, &field.0, t, &phi.0, &engine.0)
        .map(|v| v.value)
        .map_err(err)
}

/// `<measure, phi * beta_k>`.
#[pyfunction]
fn weak_derivative(measure: &PyMeasure, field: &PyField, phi: &PyTestFunction, engine: &PyEngine) -> PyResult<Complex64> {
    transport::analytic_weak_derivative(&measure.0, &field.0, &phi.0, &engine.0).map_err(err)
}

/// `-<measure, <grad phi, k>>`.
#[pyfunction]
fn weak_derivative_by_parts(measure: &PyMeasure, field: &PyField, phi: &PyTestFunction, engine: &PyEngine) -> PyResult<Complex64> {
    transport::transport_weak_derivative(&measure.0, &field.0, &phi.0, &engine.0).map_err(err)
}

/// Central difference of [`pushforward_pairing`] in `t` at zero.
#[pyfunction]
#[pyo3(signature = (measure, field, phi, engine, step=1e-4))]
fn weak_derivative_fd(measure: &PyMeasure, field: &PyField, phi: &PyTestFunction, engine: &PyEngine, step: f64) -> PyResult<Complex64> {
    transport::weak_derivative_fd(&measure.0, &field.0, &phi.0, &engine.0, step).map_err(err)
}

/// Regularized Fresnel pairing of a plane wave against `exp(i a y^2 / 2)` in
/// one dimension, as `(closed_form, contour_quadrature)`.
#[pyfunction]
#[pyo3(signature = (a, epsilon, frequency, order=40))]
fn fresnel_scalar(a: f64, epsilon: f64, frequency: f64, order: usize) -> PyResult<(Complex64, Complex64)> {
    let weight = FeynmanWeight::from_action(Arc::new(QuadraticAction::scalar(a)), InitialData::Unit, epsilon, vec![], vec![])
        .map_err(err)?;
    let phi = TestFunction::plane_wave(vec![frequency]);
    let closed = fresnel_closed_form(&weight, &phi).map_err(err)?;
    let contour = fresnel_contour_quadrature(&weight, &phi, order).map_err(err)?;
    Ok((closed, contour))
}

/// Anomaly of the flat lattice measure under scaling by `z` at `path`.
#[pyfunction]
fn scaling_anomaly(d: usize, steps: usize, z: f64, path: Vec<f64>) -> PyResult<f64> {
    let space = LatticePathSpace::new(d, steps, 1.0).map_err(err)?;
    let family = TransformationFamily::base_scaling(space.dim(), 0);
    anomaly_term(&space, &family, &[z], &path).map_err(err)
}

/// Anomaly of the flat lattice measure along a flow generated by `field`.
#[pyfunction]
fn flow_anomaly(d: usize, steps: usize, field: &PyField, path: Vec<f64>) -> PyResult<f64> {
    let space = LatticePathSpace::new(d, steps, 1.0).map_err(err)?;
    let family = TransformationFamily::base_flow(0, field.0.clone());
    anomaly_term(&space, &family, &[1.0], &path).map_err(err)
}

/// Catalog of builtin components, optionally filtered by kind.
#[pyfunction]
#[pyo3(signature = (kind=None))]
fn catalog<'py>(py: Python<'py>, kind: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        Some(k) => Some(CatalogKind::parse(k).ok_or_else(|| PyValueError::new_err(format!("unknown kind `{k}`")))?),
        None => None,
    };
    to_py(py, &scenario::catalog(kind))
}

#[pyfunction]
fn builtin_scenarios() -> Vec<String> {
    scenario::builtin_scenarios().into_iter().map(|s| s.name).collect()
}

/// Run a builtin scenario by name, or a scenario given as a dict, and return
/// the report as a dict.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, variant=None))]
fn run_scenario<'py>(
    py: Python<'py>,
    scenario: &Bound<'py, PyAny>,
    seed: Option<u64>,
    variant: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ScenarioConfig = match scenario.extract::<String>() {
        Ok(name) => scenario::builtin_scenario(&name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown builtin scenario `{name}`")))?,
        Err(_) => from_py(scenario)?,
    };
    let variant = match variant {
        Some(v) => Some(VariantSelection::parse(v).ok_or_else(|| PyValueError::new_err(format!("unknown variant `{v}`")))?),
        None => None,
    };
    let report = py
        .detach(|| scenario::run_scenario(&cfg, &RunOptions { seed, variant }))
        .map_err(|e| match e {
            RunError::Validation(problems) => PyValueError::new_err(problems.join("; ")),
            RunError::Numeric(e) => err(e),
        })?;
    to_py(py, &report)
}

#[pymodule(name = "logderiv")]
fn logderiv_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyTestFunction>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(pair, m)?)?;
    m.add_function(wrap_pyfunction!(pushforward_pairing, m)?)?;
    m.add_function(wrap_pyfunction!(weak_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(weak_derivative_by_parts, m)?)?;
    m.add_function(wrap_pyfunction!(weak_derivative_fd, m)?)?;
    m.add_function(wrap_pyfunction!(fresnel_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_anomaly, m)?)?;
    m.add_function(wrap_pyfunction!(flow_anomaly, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}

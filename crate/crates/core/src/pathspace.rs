//! Lattice phase-space paths, discretized actions, regularized Fresnel
//! pairings against the flat measure, and the Jacobian-trace anomaly term.
//!
//! A path over `N` time steps with `d` degrees of freedom is a point of
//! `R^M`, `M = 2dN`, laid out as `(Q(τ_1..τ_N), P(τ_1..τ_N))`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fd::{self, FdConfig};
use crate::measure::{log_derivative_along_field, DensityMeasure, TestFunction, VectorField};
use crate::noether::{variation_fields, FieldConfiguration, LagrangianDensity, NoetherSetup, TransformationFamily};
use crate::pairing::{pair_fn, PairingEngine, PairingMode, PairingValue};
use crate::quadrature::Rule1d;

/// Largest path dimension accepted by deterministic quadrature of non-quadratic actions.
pub const MAX_QUADRATURE_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatticePathSpace {
    d: usize,
    steps: usize,
    t_total: f64,
    dt: f64,
}

impl LatticePathSpace {
    /// The stored horizon is `dt * steps`, which may differ from `t_total` in the last bit.
    pub fn new(d: usize, steps: usize, t_total: f64) -> Result<Self> {
        if d == 0 || steps == 0 {
            return Err(Error::Invalid(format!(
                "path space needs d >= 1 and N >= 1, got d = {d}, N = {steps}"
            )));
        }
        if !(t_total > 0.0 && t_total.is_finite()) {
            return Err(Error::Invalid(format!("time horizon must be positive, got {t_total}")));
        }
        let dt = t_total / steps as f64;
        Ok(Self {
            d,
            steps,
            t_total: dt * steps as f64,
            dt,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t_total(&self) -> f64 {
        self.t_total
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `M = 2dN`.
    pub fn dim(&self) -> usize {
        2 * self.d * self.steps
    }

    /// Index of `Q(τ_{j+1})_a` for zero-based step `j`.
    pub fn q_index(&self, j: usize, a: usize) -> usize {
        j * self.d + a
    }

    /// Index of `P(τ_{j+1})_a` for zero-based step `j`.
    pub fn p_index(&self, j: usize, a: usize) -> usize {
        self.d * self.steps + j * self.d + a
    }

    pub fn q<'a>(&self, path: &'a [f64], j: usize) -> &'a [f64] {
        &path[j * self.d..(j + 1) * self.d]
    }

    pub fn p<'a>(&self, path: &'a [f64], j: usize) -> &'a [f64] {
        let off = self.d * self.steps;
        &path[off + j * self.d..off + (j + 1) * self.d]
    }

    /// Indices of `Q(τ_N)`.
    pub fn endpoint_indices(&self) -> Vec<usize> {
        (0..self.d).map(|a| self.q_index(self.steps - 1, a)).collect()
    }
}

/// Rule for the kinetic pairing `∫ <dQ/dτ, P> dτ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KineticScheme {
    /// `sum_j <Q_j - Q_{j-1}, P_j>` with `Q_0 = 0`.
    #[default]
    Forward,
    /// `sum_j <(Q_{j+1} - Q_{j-1}) / 2, P_j>` with `Q_0 = 0` and `Q_{N+1} = Q_N`.
    Midpoint,
}

type HamFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type HamGradFn = Arc<dyn Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + Send + Sync>;

/// `h(q, p) = ½ yᵀ H y + gᵀ y + c` with `y = (q, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticHamiltonian {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

/// A classical Hamiltonian `h(q, p)` on `R^d × R^d`.
#[derive(Clone)]
pub struct Hamiltonian {
    d: usize,
    value: HamFn,
    gradient: HamGradFn,
    quadratic: Option<QuadraticHamiltonian>,
    label: String,
}

impl fmt::Debug for Hamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hamiltonian({}, d={})", self.label, self.d)
    }
}

impl Hamiltonian {
    pub fn zero(d: usize) -> Self {
        Self::quadratic(DMatrix::zeros(2 * d, 2 * d), DVector::zeros(2 * d), 0.0)
            .expect("zero form is symmetric")
            .with_label("zero")
    }

    pub fn quadratic(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Result<Self> {
        let two_d = linear.len();
        if two_d == 0 || two_d % 2 != 0 {
            return Err(Error::Invalid(format!("hamiltonian needs an even number of variables, got {two_d}")));
        }
        check_dim("hamiltonian hessian rows", two_d, hessian.nrows())?;
        check_dim("hamiltonian hessian cols", two_d, hessian.ncols())?;
        if (&hessian - hessian.transpose()).amax() > 0.0 {
            return Err(Error::Invalid("hamiltonian hessian must be symmetric".into()));
        }
        let d = two_d / 2;
        let form = QuadraticHamiltonian {
            hessian: hessian.clone(),
            linear: linear.clone(),
            constant,
        };
        let (h1, l1) = (hessian.clone(), linear.clone());
        let value: HamFn = Arc::new(move |q, p| {
            let y = DVector::from_iterator(2 * d, q.iter().chain(p).copied());
            0.5 * y.dot(&(&h1 * &y)) + l1.dot(&y) + constant
        });
        let gradient: HamGradFn = Arc::new(move |q, p| {
            let y = DVector::from_iterator(2 * d, q.iter().chain(p).copied());
            let g = &hessian * &y + &linear;
            (g.as_slice()[..d].to_vec(), g.as_slice()[d..].to_vec())
        });
        Ok(Self {
            d,
            value,
            gradient,
            quadratic: Some(form),
            label: "quadratic".into(),
        })
    }

    /// `|p|^2 / (2 mass)`.
    pub fn free_particle(d: usize, mass: f64) -> Result<Self> {
        Self::harmonic(d, mass, 0.0).map(|h| h.with_label("free-particle"))
    }

    /// `|p|^2 / (2 mass) + mass ω^2 |q|^2 / 2`.
    pub fn harmonic(d: usize, mass: f64, omega: f64) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Invalid(format!("mass must be positive, got {mass}")));
        }
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        for a in 0..d {
            h[(a, a)] = mass * omega * omega;
            h[(d + a, d + a)] = 1.0 / mass;
        }
        Ok(Self::quadratic(h, DVector::zeros(2 * d), 0.0)?.with_label("harmonic"))
    }

    /// `|p|^2 / 2 + ω^2 |q|^2 / 2 + λ sum_a q_a^4`; not quadratic unless `λ = 0`.
    pub fn anharmonic(d: usize, omega: f64, lambda: f64) -> Self {
        let value: HamFn = Arc::new(move |q, p| {
            let kin: f64 = p.iter().map(|v| v * v).sum::<f64>() * 0.5;
            let pot: f64 = q.iter().map(|v| 0.5 * omega * omega * v * v + lambda * v.powi(4)).sum();
            kin + pot
        });
        let gradient: HamGradFn = Arc::new(move |q, p| {
            (
                q.iter().map(|v| omega * omega * v + 4.0 * lambda * v.powi(3)).collect(),
                p.to_vec(),
            )
        });
        Self {
            d,
            value,
            gradient,
            quadratic: None,
            label: "anharmonic".into(),
        }
    }

    pub fn custom(d: usize, value: HamFn, gradient: HamGradFn, fd_cfg: FdConfig) -> Result<Self> {
        let h = Self {
            d,
            value,
            gradient,
            quadratic: None,
            label: "custom".into(),
        };
        for y in fd::probe_points(2 * d, 6, 1.5) {
            let (gq, gp) = h.gradient(&y[..d], &y[d..]);
            check_dim("hamiltonian q-gradient", d, gq.len())?;
            check_dim("hamiltonian p-gradient", d, gp.len())?;
            let analytic: Vec<f64> = gq.into_iter().chain(gp).collect();
            let numeric = fd::gradient(|v| h.value(&v[..d], &v[d..]), &y, fd_cfg.step);
            let err = fd::max_rel_err(&analytic, &numeric);
            if !err.is_finite() || err > fd_cfg.tol {
                return Err(Error::DerivativeMismatch {
                    what: "hamiltonian gradient",
                    point: y,
                    rel_err: err,
                    tol: fd_cfg.tol,
                });
            }
        }
        Ok(h)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, q: &[f64], p: &[f64]) -> f64 {
        (self.value)(q, p)
    }

    pub fn gradient(&self, q: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.gradient)(q, p)
    }

    pub fn quadratic_form(&self) -> Option<&QuadraticHamiltonian> {
        self.quadratic.as_ref()
    }
}

/// `S(x) = ½ xᵀ A x + bᵀ x + c` on `R^M`, `A` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticAction {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl QuadraticAction {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        check_dim("action matrix rows", b.len(), a.nrows())?;
        check_dim("action matrix cols", b.len(), a.ncols())?;
        if (&a - a.transpose()).amax() > 1e-14 * a.amax().max(1.0) {
            return Err(Error::Invalid("quadratic action matrix must be symmetric".into()));
        }
        let a = (&a + a.transpose()) * 0.5;
        Ok(Self { a, b, c })
    }

    /// `S(x) = a x^2 / 2` on `R^1`.
    pub fn scalar(a: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DVector::zeros(1),
            c: 0.0,
        }
    }
}

/// An action functional on a path space `R^M`.
pub trait PathAction: fmt::Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, path: &[f64]) -> f64;
    fn gradient(&self, path: &[f64]) -> Vec<f64>;
    /// Exact quadratic representation, when the action is quadratic.
    fn quadratic(&self) -> Option<QuadraticAction> {
        None
    }
    fn label(&self) -> String;
}

impl PathAction for QuadraticAction {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, path: &[f64]) -> f64 {
        let x = DVector::from_column_slice(path);
        0.5 * x.dot(&(&self.a * &x)) + self.b.dot(&x) + self.c
    }

    fn gradient(&self, path: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(path);
        (&self.a * x + &self.b).as_slice().to_vec()
    }

    fn quadratic(&self) -> Option<QuadraticAction> {
        Some(self.clone())
    }

    fn label(&self) -> String {
        "quadratic-action".into()
    }
}

/// `S = sum_j h(Q_j + q, P_j) dt - kinetic(Q, P)`.
#[derive(Debug, Clone)]
pub struct DiscreteAction {
    space: LatticePathSpace,
    hamiltonian: Hamiltonian,
    q: Vec<f64>,
    scheme: KineticScheme,
    // K = Qᵀ C P
    kinetic_matrix: DMatrix<f64>,
}

pub fn discretize_action(space: LatticePathSpace, hamiltonian: Hamiltonian, q: Vec<f64>) -> Result<DiscreteAction> {
    DiscreteAction::new(space, hamiltonian, q, KineticScheme::Forward)
}

impl DiscreteAction {
    pub fn new(space: LatticePathSpace, hamiltonian: Hamiltonian, q: Vec<f64>, scheme: KineticScheme) -> Result<Self> {
        check_dim("hamiltonian degrees of freedom", space.d(), hamiltonian.d())?;
        check_dim("boundary offset", space.d(), q.len())?;
        let kinetic_matrix = kinetic_matrix(&space, scheme);
        Ok(Self {
            space,
            hamiltonian,
            q,
            scheme,
            kinetic_matrix,
        })
    }

    pub fn with_scheme(self, scheme: KineticScheme) -> Self {
        let kinetic_matrix = kinetic_matrix(&self.space, scheme);
        Self {
            scheme,
            kinetic_matrix,
            ..self
        }
    }

    pub fn space(&self) -> &LatticePathSpace {
        &self.space
    }

    pub fn offset(&self) -> &[f64] {
        &self.q
    }

    pub fn scheme(&self) -> KineticScheme {
        self.scheme
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.hamiltonian
    }

    /// The coefficient matrix `C` of the kinetic form `Qᵀ C P`.
    pub fn kinetic_matrix(&self) -> &DMatrix<f64> {
        &self.kinetic_matrix
    }

    pub fn kinetic(&self, path: &[f64]) -> f64 {
        let s = &self.space;
        let n = s.steps();
        let zero = vec![0.0; s.d()];
        let q_at = |j: isize| -> &[f64] {
            if j < 0 {
                &zero
            } else {
                s.q(path, (j as usize).min(n - 1))
            }
        };
        let mut total = 0.0;
        for j in 0..n {
            let p = s.p(path, j);
            let ji = j as isize;
            let (next, prev, scale) = match self.scheme {
                KineticScheme::Forward => (q_at(ji), q_at(ji - 1), 1.0),
                KineticScheme::Midpoint => (q_at(ji + 1), q_at(ji - 1), 0.5),
            };
            total += scale * next.iter().zip(prev).zip(p).map(|((a, b), c)| (a - b) * c).sum::<f64>();
        }
        total
    }

    pub fn hamiltonian_term(&self, path: &[f64]) -> f64 {
        let s = &self.space;
        let mut shifted = vec![0.0; s.d()];
        let mut total = 0.0;
        for j in 0..s.steps() {
            for (dst, (a, b)) in shifted.iter_mut().zip(s.q(path, j).iter().zip(&self.q)) {
                *dst = a + b;
            }
            total += self.hamiltonian.value(&shifted, s.p(path, j));
        }
        total * s.dt()
    }
}

fn kinetic_matrix(space: &LatticePathSpace, scheme: KineticScheme) -> DMatrix<f64> {
    let (d, n) = (space.d(), space.steps());
    let mut c = DMatrix::zeros(d * n, d * n);
    for j in 0..n {
        for a in 0..d {
            let col = j * d + a;
            match scheme {
                KineticScheme::Forward => {
                    c[(col, col)] += 1.0;
                    if j > 0 {
                        c[((j - 1) * d + a, col)] -= 1.0;
                    }
                }
                KineticScheme::Midpoint => {
                    c[((j + 1).min(n - 1) * d + a, col)] += 0.5;
                    if j > 0 {
                        c[((j - 1) * d + a, col)] -= 0.5;
                    }
                }
            }
        }
    }
    c
}

impl PathAction for DiscreteAction {
    fn dim(&self) -> usize {
        self.space.dim()
    }

    fn value(&self, path: &[f64]) -> f64 {
        self.hamiltonian_term(path) - self.kinetic(path)
    }

    fn gradient(&self, path: &[f64]) -> Vec<f64> {
        let s = &self.space;
        let dn = s.d() * s.steps();
        let qv = DVector::from_column_slice(&path[..dn]);
        let pv = DVector::from_column_slice(&path[dn..]);
        let dk_dq = &self.kinetic_matrix * &pv;
        let dk_dp = self.kinetic_matrix.transpose() * &qv;
        let mut grad = vec![0.0; s.dim()];
        let mut shifted = vec![0.0; s.d()];
        for j in 0..s.steps() {
            for (dst, (a, b)) in shifted.iter_mut().zip(s.q(path, j).iter().zip(&self.q)) {
                *dst = a + b;
            }
            let (gq, gp) = self.hamiltonian.gradient(&shifted, s.p(path, j));
            for a in 0..s.d() {
                grad[s.q_index(j, a)] = gq[a] * s.dt() - dk_dq[j * s.d() + a];
                grad[s.p_index(j, a)] = gp[a] * s.dt() - dk_dp[j * s.d() + a];
            }
        }
        grad
    }

    fn quadratic(&self) -> Option<QuadraticAction> {
        let form = self.hamiltonian.quadratic_form()?;
        let s = &self.space;
        let (d, big_m, dt) = (s.d(), s.dim(), s.dt());
        let mut a = DMatrix::zeros(big_m, big_m);
        let mut b = DVector::zeros(big_m);
        // h(y + (q, 0)) = ½ yᵀHy + (H (q,0) + g)ᵀ y + h((q, 0))
        let q0 = DVector::from_iterator(2 * d, self.q.iter().copied().chain(std::iter::repeat_n(0.0, d)));
        let shifted_linear = &form.hessian * &q0 + &form.linear;
        let constant = 0.5 * q0.dot(&(&form.hessian * &q0)) + form.linear.dot(&q0) + form.constant;
        for j in 0..s.steps() {
            let idx: Vec<usize> = (0..d).map(|k| s.q_index(j, k)).chain((0..d).map(|k| s.p_index(j, k))).collect();
            for (u, &iu) in idx.iter().enumerate() {
                b[iu] += dt * shifted_linear[u];
                for (v, &iv) in idx.iter().enumerate() {
                    a[(iu, iv)] += dt * form.hessian[(u, v)];
                }
            }
        }
        let dn = d * s.steps();
        for r in 0..dn {
            for c in 0..dn {
                let k = self.kinetic_matrix[(r, c)];
                a[(r, dn + c)] -= k;
                a[(dn + c, r)] -= k;
            }
        }
        Some(QuadraticAction {
            a,
            b,
            c: constant * dt * s.steps() as f64,
        })
    }

    fn label(&self) -> String {
        format!("lattice[{}, {:?}]", self.hamiltonian.label(), self.scheme)
    }
}

/// `S = sum_j <Q_j, P_j>` on a lattice; on `d = N = 1` this is `S(x, y) = x y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockProductAction {
    space: LatticePathSpace,
}

impl BlockProductAction {
    pub fn new(space: LatticePathSpace) -> Self {
        Self { space }
    }

    pub fn space(&self) -> &LatticePathSpace {
        &self.space
    }
}

impl PathAction for BlockProductAction {
    fn dim(&self) -> usize {
        self.space.dim()
    }

    fn value(&self, path: &[f64]) -> f64 {
        let half = path.len() / 2;
        path[..half].iter().zip(&path[half..]).map(|(a, b)| a * b).sum()
    }

    fn gradient(&self, path: &[f64]) -> Vec<f64> {
        let half = path.len() / 2;
        path[half..].iter().chain(&path[..half]).copied().collect()
    }

    fn quadratic(&self) -> Option<QuadraticAction> {
        let m = self.dim();
        let half = m / 2;
        let mut a = DMatrix::zeros(m, m);
        for i in 0..half {
            a[(i, half + i)] = 1.0;
            a[(half + i, i)] = 1.0;
        }
        Some(QuadraticAction {
            a,
            b: DVector::zeros(m),
            c: 0.0,
        })
    }

    fn label(&self) -> String {
        "block-product".into()
    }
}

/// The generator `(Q_j, P_j) ↦ (Q_j^2, -Q_j P_j)`, componentwise on every block.
/// It leaves [`BlockProductAction`] invariant and has divergence `sum_j Q_j`.
pub fn desk_generator(space: &LatticePathSpace) -> VectorField {
    let m = space.dim();
    let half = m / 2;
    VectorField::from_parts(
        m,
        Arc::new(move |x: &[f64]| {
            let mut k = vec![0.0; x.len()];
            for i in 0..half {
                k[i] = x[i] * x[i];
                k[half + i] = -x[i] * x[half + i];
            }
            k
        }),
        Arc::new(move |x: &[f64]| {
            let mut j = DMatrix::zeros(m, m);
            for i in 0..half {
                j[(i, i)] = 2.0 * x[i];
                j[(half + i, i)] = -x[half + i];
                j[(half + i, half + i)] = -x[i];
            }
            j
        }),
        "desk-generator".into(),
    )
}

type InitialFn = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;
type InitialGradFn = Arc<dyn Fn(&[f64]) -> Vec<Complex64> + Send + Sync>;

/// Initial data `f`, evaluated at `Q(τ_N) + q`.
#[derive(Clone)]
pub enum InitialData {
    Unit,
    PlaneWave(Vec<f64>),
    Custom {
        value: InitialFn,
        gradient: InitialGradFn,
        label: String,
    },
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialData::Unit => write!(f, "Unit"),
            InitialData::PlaneWave(k) => write!(f, "PlaneWave({k:?})"),
            InitialData::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl InitialData {
    pub fn value(&self, y: &[f64]) -> Complex64 {
        match self {
            InitialData::Unit => Complex64::new(1.0, 0.0),
            InitialData::PlaneWave(k) => Complex64::from_polar(1.0, k.iter().zip(y).map(|(a, b)| a * b).sum()),
            InitialData::Custom { value, .. } => value(y),
        }
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<Complex64> {
        match self {
            InitialData::Unit => vec![Complex64::new(0.0, 0.0); y.len()],
            InitialData::PlaneWave(k) => {
                let v = self.value(y);
                k.iter().map(|w| Complex64::new(0.0, *w) * v).collect()
            }
            InitialData::Custom { gradient, .. } => gradient(y),
        }
    }
}

/// `e^{iS(x)} f(Q(τ_N)(x) + q) e^{-ε|x|^2/2}` times the flat measure on `R^M`.
#[derive(Debug, Clone)]
pub struct FeynmanWeight {
    action: Arc<dyn PathAction>,
    initial: InitialData,
    epsilon: f64,
    endpoint: Vec<usize>,
    offset: Vec<f64>,
}

impl FeynmanWeight {
    pub fn new(action: DiscreteAction, initial: InitialData, epsilon: f64) -> Result<Self> {
        let endpoint = action.space().endpoint_indices();
        let offset = action.offset().to_vec();
        Self::from_action(Arc::new(action), initial, epsilon, endpoint, offset)
    }

    /// Weight for an arbitrary action; `f` is evaluated at `x[endpoint] + offset`.
    pub fn from_action(
        action: Arc<dyn PathAction>,
        initial: InitialData,
        epsilon: f64,
        endpoint: Vec<usize>,
        offset: Vec<f64>,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidRegularization(epsilon));
        }
        check_dim("endpoint offset", endpoint.len(), offset.len())?;
        if let Some(&bad) = endpoint.iter().find(|&&i| i >= action.dim()) {
            return Err(Error::Invalid(format!("endpoint index {bad} outside path dimension {}", action.dim())));
        }
        if let InitialData::PlaneWave(k) = &initial {
            check_dim("initial data frequency", endpoint.len(), k.len())?;
        }
        Ok(Self {
            action,
            initial,
            epsilon,
            endpoint,
            offset,
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::from_action(
            self.action.clone(),
            self.initial.clone(),
            epsilon,
            self.endpoint.clone(),
            self.offset.clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.action.dim()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn action(&self) -> &dyn PathAction {
        self.action.as_ref()
    }

    pub fn initial(&self) -> &InitialData {
        &self.initial
    }

    /// `e^{iS(x)}`, of unit modulus.
    pub fn phase(&self, path: &[f64]) -> Complex64 {
        Complex64::from_polar(1.0, self.action.value(path))
    }

    fn endpoint_point(&self, path: &[f64]) -> Vec<f64> {
        self.endpoint.iter().zip(&self.offset).map(|(&i, q)| path[i] + q).collect()
    }

    pub fn initial_value(&self, path: &[f64]) -> Complex64 {
        self.initial.value(&self.endpoint_point(path))
    }

    /// `e^{iS} f` without the damping factor.
    pub fn undamped(&self, path: &[f64]) -> Complex64 {
        self.phase(path) * self.initial_value(path)
    }

    /// `d/dz log f(Q(τ_N)(x + z h) + q)` at `z = 0`.
    fn initial_log_derivative(&self, path: &[f64], h: &[f64]) -> Complex64 {
        if matches!(self.initial, InitialData::Unit) {
            return Complex64::new(0.0, 0.0);
        }
        let y = self.endpoint_point(path);
        let grad = self.initial.gradient(&y);
        let dir: Complex64 = grad.iter().zip(&self.endpoint).map(|(g, &i)| g * h[i]).sum();
        dir / self.initial.value(&y)
    }

    /// The Gaussian `N(0, I/ε)`; the damping factor is `(2π/ε)^{M/2}` times its density.
    fn damping_measure(&self) -> Result<DensityMeasure> {
        let m = self.dim();
        DensityMeasure::gaussian(&vec![0.0; m], &DMatrix::from_diagonal_element(m, m, 1.0 / self.epsilon))
    }

    fn damping_mass(&self) -> f64 {
        (2.0 * PI / self.epsilon).powf(0.5 * self.dim() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FresnelMethod {
    ClosedForm,
    DampedQuadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FresnelValue {
    pub value: Complex64,
    pub std_error: Option<f64>,
    pub method: FresnelMethod,
}

/// Linear frequency, constant phase and amplitude of `φ · f` when both are plane waves.
fn wave_terms(weight: &FeynmanWeight, phi: &TestFunction) -> Option<(DVector<f64>, f64, f64)> {
    let (amp, freq) = phi.wave_data()?;
    let mut omega = DVector::from_column_slice(freq);
    let mut phase = 0.0;
    match &weight.initial {
        InitialData::Unit => {}
        InitialData::PlaneWave(k) => {
            for ((&i, kk), q) in weight.endpoint.iter().zip(k).zip(&weight.offset) {
                omega[i] += kk;
                phase += kk * q;
            }
        }
        InitialData::Custom { .. } => return None,
    }
    Some((omega, phase, amp))
}

/// `∫ φ e^{iS} f e^{-ε|x|^2/2} dx` in closed form, for quadratic `S` and plane-wave `φ` and `f`:
/// `(2π)^{M/2} prod_k (ε - i a_k)^{-1/2} exp(-½ wᵀ B^{-1} w + i c)`, `B = εI - iA`.
pub fn fresnel_closed_form(weight: &FeynmanWeight, phi: &TestFunction) -> Result<Complex64> {
    check_dim("test function", weight.dim(), phi.dim())?;
    let quad = weight
        .action
        .quadratic()
        .ok_or_else(|| Error::Invalid("closed form needs a quadratic action".into()))?;
    let (omega, phase, amp) = wave_terms(weight, phi)
        .ok_or_else(|| Error::Invalid("closed form needs plane-wave test function and initial data".into()))?;
    let m = weight.dim();
    let eps = weight.epsilon;
    let w = (&quad.b + omega).map(|v| Complex64::new(v, 0.0));
    let eigen = quad.a.clone().symmetric_eigen();
    let mut prefactor = Complex64::new((2.0 * PI).powf(0.5 * m as f64), 0.0);
    for a in eigen.eigenvalues.iter() {
        prefactor /= Complex64::new(eps, -a).sqrt();
    }
    let b = DMatrix::from_fn(m, m, |i, j| {
        Complex64::new(if i == j { eps } else { 0.0 }, -quad.a[(i, j)])
    });
    let solved = b
        .lu()
        .solve(&w)
        .ok_or_else(|| Error::Invalid("singular regularized action".into()))?;
    let quad_term: Complex64 = w.iter().zip(solved.iter()).map(|(a, b)| a * b).sum();
    let exponent = -0.5 * quad_term + Complex64::new(0.0, quad.c + phase);
    Ok(prefactor * exponent.exp() * amp)
}

/// The same integral by quadrature along steepest-descent contours.
///
/// The real symmetric `A` is diagonalized, and in each eigen-direction the
/// real line is moved to `y* + e^{iθ} R`, through the saddle `y*` of the
/// mode's exponent, with `2θ = arg(ε + iλ)`. That turns the regularized phase
/// into a real Gaussian; the one-dimensional integrals are done with
/// Gauss–Hermite rules of order `order`. Passing through the saddle keeps
/// wide, nearly flat modes (small `ε` and `λ`) from oscillating along the
/// contour.
pub fn fresnel_contour_quadrature(weight: &FeynmanWeight, phi: &TestFunction, order: usize) -> Result<Complex64> {
    check_dim("test function", weight.dim(), phi.dim())?;
    let quad = weight
        .action
        .quadratic()
        .ok_or_else(|| Error::Invalid("contour quadrature needs a quadratic action".into()))?;
    let (omega, phase, amp) = wave_terms(weight, phi)
        .ok_or_else(|| Error::Invalid("contour quadrature needs plane-wave test function and initial data".into()))?;
    let eps = weight.epsilon;
    let eigen = quad.a.clone().symmetric_eigen();
    let w_modes = eigen.eigenvectors.transpose() * (&quad.b + omega);
    let rule = Rule1d::gauss_hermite(order);
    let mut total = Complex64::new(amp, 0.0) * Complex64::new(0.0, quad.c + phase).exp();
    for (lambda, w) in eigen.eigenvalues.iter().zip(w_modes.iter()) {
        // ∫ exp(-½(ε - iλ) y^2 + i w y) dy with y = e^{iθ} s
        let b = Complex64::new(eps, -lambda);
        let theta = 0.5 * lambda.atan2(eps);
        let rot = Complex64::from_polar(1.0, theta);
        let g = (b * rot * rot).re;
        let saddle = Complex64::new(0.0, *w) / b;
        // s = u sqrt(2/g) maps the real Gaussian to the Hermite weight e^{-u^2}
        let scale = (2.0 / g).sqrt();
        let mut acc = Complex64::new(0.0, 0.0);
        for (u, wt) in rule.nodes.iter().zip(&rule.weights) {
            let s = u * scale;
            let y = saddle + rot * s;
            let residual = -0.5 * b * y * y + Complex64::new(0.0, *w) * y + 0.5 * g * s * s;
            acc += residual.exp() * *wt;
        }
        total *= acc * rot * scale;
    }
    Ok(total)
}

/// ε-damped pairing `∫ integrand · e^{-ε|x|^2/2} dx` by the engine.
pub fn damped_pair_fn<F>(weight: &FeynmanWeight, engine: &PairingEngine, integrand: F) -> Result<PairingValue>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let m = weight.dim();
    if engine.mode != PairingMode::MonteCarlo && m > MAX_QUADRATURE_DIM {
        return Err(Error::PathDimensionTooLarge {
            got: m,
            max: MAX_QUADRATURE_DIM,
        });
    }
    let measure = weight.damping_measure()?;
    let v = pair_fn(&measure, engine, integrand)?;
    let mass = weight.damping_mass();
    Ok(PairingValue {
        value: v.value * mass,
        std_error: v.std_error.map(|s| s * mass),
    })
}

/// `∫ φ e^{iS} f e^{-ε|x|^2/2} dx`.
///
/// Quadratic actions with plane-wave `φ` and `f` use the closed form; anything
/// else goes through damped quadrature (`M ≤ 12`) or Monte Carlo.
pub fn fresnel_pair(weight: &FeynmanWeight, phi: &TestFunction, engine: &PairingEngine) -> Result<FresnelValue> {
    check_dim("test function", weight.dim(), phi.dim())?;
    if weight.action.quadratic().is_some() && wave_terms(weight, phi).is_some() {
        return Ok(FresnelValue {
            value: fresnel_closed_form(weight, phi)?,
            std_error: None,
            method: FresnelMethod::ClosedForm,
        });
    }
    let v = damped_pair_fn(weight, engine, |x| phi.value(x) * weight.undamped(x))?;
    Ok(FresnelValue {
        value: v.value,
        std_error: v.std_error,
        method: if engine.mode == PairingMode::MonteCarlo {
            FresnelMethod::MonteCarlo
        } else {
            FresnelMethod::DampedQuadrature
        },
    })
}

/// Closed-form values at a decreasing sequence of ε.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonSweep {
    pub epsilons: Vec<f64>,
    pub values: Vec<Complex64>,
    /// `|v_{k+1} - v_k|`.
    pub cauchy_differences: Vec<f64>,
    pub monotone: bool,
}

pub fn epsilon_sweep(weight: &FeynmanWeight, phi: &TestFunction, epsilons: &[f64]) -> Result<EpsilonSweep> {
    let values = epsilons
        .iter()
        .map(|&e| fresnel_closed_form(&weight.with_epsilon(e)?, phi))
        .collect::<Result<Vec<_>>>()?;
    let cauchy_differences: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let monotone = cauchy_differences.windows(2).all(|w| w[1] < w[0]);
    Ok(EpsilonSweep {
        epsilons: epsilons.to_vec(),
        values,
        cauchy_differences,
        monotone,
    })
}

/// Noether setup with trivial `G` and the flat measure on `R^M`.
fn path_setup(family: &TransformationFamily) -> Result<NoetherSetup> {
    let (m_path, g_dim) = family.dims();
    check_dim("field space of a path family", 0, g_dim)?;
    NoetherSetup::new(
        LagrangianDensity::unit(m_path, 0),
        FieldConfiguration::constant(m_path, vec![]),
        family.clone(),
        DensityMeasure::flat(m_path),
    )
}

/// `tr h1'(path)`: the logarithmic derivative of the flat path measure along
/// the family's generator.
pub fn anomaly_term(space: &LatticePathSpace, family: &TransformationFamily, delta: &[f64], path: &[f64]) -> Result<f64> {
    check_dim("path family dimension", space.dim(), family.dims().0)?;
    check_dim("path", space.dim(), path.len())?;
    let setup = path_setup(family)?;
    let h1 = variation_fields(&setup, delta)?.h1_field();
    log_derivative_along_field(&setup.measure, &h1, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorollaryStatus {
    Applicable,
    Inapplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnomalySample {
    pub path: Vec<f64>,
    pub anomaly: f64,
    /// Trace of the finite-difference Jacobian of `h1`.
    pub fd_trace: f64,
}

/// FD `z`-derivative of the regularized pairing, against its decomposition
/// `-<μ, φ (i<∇S, h1> + ∇f·h1/f + tr h1' - ε<x, h1>)>`.
#[derive(Debug, Clone, Serialize)]
pub struct CorollaryCheck {
    pub fd_derivative: Complex64,
    pub predicted: Complex64,
    /// `-<μ, φ tr h1'>`.
    pub anomaly_part: Complex64,
    /// `ε <μ, φ <x, h1>>`, the regularization artifact.
    pub regularization_part: Complex64,
    pub abs_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnomalyReport {
    pub max_action_derivative: f64,
    pub max_initial_derivative: f64,
    /// `max |i<∇S, h1> + d/dz log f|` over the probes.
    pub certificate: f64,
    pub certificate_tol: f64,
    pub status: CorollaryStatus,
    pub samples: Vec<AnomalySample>,
    pub max_fd_trace_err: f64,
    pub corollary: Option<CorollaryCheck>,
}

/// Inputs for the optional FD check of the decomposition in [`anomaly_report`].
#[derive(Debug, Clone)]
pub struct CorollaryProbe<'a> {
    pub phi: &'a TestFunction,
    pub engine: &'a PairingEngine,
    pub step: f64,
    pub tol: f64,
}

pub fn anomaly_report(
    family: &TransformationFamily,
    delta: &[f64],
    weight: &FeynmanWeight,
    probes: &[Vec<f64>],
    certificate_tol: f64,
    corollary: Option<CorollaryProbe<'_>>,
) -> Result<AnomalyReport> {
    let m = weight.dim();
    check_dim("path family dimension", m, family.dims().0)?;
    let setup = path_setup(family)?;
    let fields = variation_fields(&setup, delta)?;
    let h1 = fields.h1_field();

    let per_probe = probes
        .par_iter()
        .map(|x| {
            check_dim("probe path", m, x.len())?;
            let h = h1.value(x);
            let grad = weight.action.gradient(x);
            let action_derivative: f64 = grad.iter().zip(&h).map(|(a, b)| a * b).sum();
            let initial_derivative = weight.initial_log_derivative(x, &h);
            let anomaly = log_derivative_along_field(&setup.measure, &h1, x)?;
            let fd_trace = fd::jacobian(|v| h1.value(v), x, 1e-5).trace();
            Ok((
                action_derivative,
                initial_derivative,
                AnomalySample {
                    path: x.clone(),
                    anomaly,
                    fd_trace,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut max_action_derivative: f64 = 0.0;
    let mut max_initial_derivative: f64 = 0.0;
    let mut certificate: f64 = 0.0;
    let mut max_fd_trace_err: f64 = 0.0;
    let mut samples = Vec::with_capacity(per_probe.len());
    for (a, f, s) in per_probe {
        max_action_derivative = max_action_derivative.max(a.abs());
        max_initial_derivative = max_initial_derivative.max(f.norm());
        certificate = certificate.max((Complex64::new(0.0, a) + f).norm());
        max_fd_trace_err = max_fd_trace_err.max((s.anomaly - s.fd_trace).abs());
        samples.push(s);
    }
    let status = if certificate <= certificate_tol {
        CorollaryStatus::Applicable
    } else {
        CorollaryStatus::Inapplicable
    };

    let corollary = match corollary {
        None => None,
        Some(probe) => Some(corollary_check(family, delta, weight, &h1, probe)?),
    };
    Ok(AnomalyReport {
        max_action_derivative,
        max_initial_derivative,
        certificate,
        certificate_tol,
        status,
        samples,
        max_fd_trace_err,
        corollary,
    })
}

fn corollary_check(
    family: &TransformationFamily,
    delta: &[f64],
    weight: &FeynmanWeight,
    h1: &VectorField,
    probe: CorollaryProbe<'_>,
) -> Result<CorollaryCheck> {
    fd::validate_step(probe.step)?;
    check_dim("test function", weight.dim(), probe.phi.dim())?;
    let no_alpha = DMatrix::zeros(0, weight.dim());
    let transported = |z: f64| {
        let zd: Vec<f64> = delta.iter().map(|d| d * z).collect();
        damped_pair_fn(weight, probe.engine, |x| {
            let (y, _) = family.apply(&zd, x, &[], &no_alpha);
            probe.phi.value(&y) * weight.undamped(x)
        })
        .map(|v| v.value)
    };
    let fd_derivative = (transported(probe.step)? - transported(-probe.step)?) / (2.0 * probe.step);

    let eps = weight.epsilon;
    let with = |density: &(dyn Fn(&[f64], &[f64]) -> Complex64 + Sync)| {
        damped_pair_fn(weight, probe.engine, |x| {
            let h = h1.value(x);
            probe.phi.value(x) * weight.undamped(x) * density(x, &h)
        })
        .map(|v| v.value)
    };
    let predicted = -with(&|x, h| {
        let a: f64 = weight.action.gradient(x).iter().zip(h).map(|(g, v)| g * v).sum();
        let xh: f64 = x.iter().zip(h).map(|(p, v)| p * v).sum();
        Complex64::new(0.0, a) + weight.initial_log_derivative(x, h) + h1.jacobian(x).trace() - eps * xh
    })?;
    let anomaly_part = -with(&|x, _| Complex64::new(h1.jacobian(x).trace(), 0.0))?;
    let regularization_part = with(&|x, h| Complex64::new(eps * x.iter().zip(h).map(|(p, v)| p * v).sum::<f64>(), 0.0))?;
    let abs_err = (fd_derivative - predicted).norm();
    Ok(CorollaryCheck {
        fd_derivative,
        predicted,
        anomaly_part,
        regularization_part,
        abs_err,
        tol: probe.tol,
        pass: abs_err <= probe.tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementReport {
    /// `(M, anomaly)` per refinement level.
    pub points: Vec<(usize, f64)>,
    /// Ratio of consecutive anomalies.
    pub ratios: Vec<f64>,
    /// Ratio of consecutive path dimensions.
    pub dimension_ratios: Vec<f64>,
}

/// Anomaly at each refinement level; `make(N)` returns the space, family and probe path.
pub fn anomaly_refinement<F>(steps: &[usize], make: F) -> Result<RefinementReport>
where
    F: Fn(usize) -> Result<(LatticePathSpace, TransformationFamily, Vec<f64>)> + Sync,
{
    let points = steps
        .par_iter()
        .map(|&n| {
            let (space, family, path) = make(n)?;
            let delta = vec![1.0; family.param_dim()];
            Ok((space.dim(), anomaly_term(&space, &family, &delta, &path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios = points.windows(2).map(|w| w[1].1 / w[0].1).collect();
    let dimension_ratios = points.windows(2).map(|w| w[1].0 as f64 / w[0].0 as f64).collect();
    Ok(RefinementReport {
        points,
        ratios,
        dimension_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Monomial;

    fn space(d: usize, n: usize, t: f64) -> LatticePathSpace {
        LatticePathSpace::new(d, n, t).unwrap()
    }

    #[test]
    fn layout_and_horizon() {
        let s = space(2, 3, 0.1);
        assert_eq!(s.dim(), 12);
        assert_eq!(s.dt() * 3.0, s.t_total());
        assert_eq!(s.q_index(2, 1), 5);
        assert_eq!(s.p_index(0, 0), 6);
        assert_eq!(s.endpoint_indices(), vec![4, 5]);
        assert!(LatticePathSpace::new(0, 3, 1.0).is_err());
    }

    #[test]
    fn action_examples() {
        let s = space(1, 2, 1.0);
        let act = discretize_action(s, Hamiltonian::zero(1), vec![0.0]).unwrap();
        assert_eq!(act.value(&[0.0; 4]), 0.0);
        assert_eq!(act.kinetic(&[1.0, 2.0, 3.0, 5.0]), 8.0);

        let s = space(1, 1, 1.0);
        let act = discretize_action(s, Hamiltonian::free_particle(1, 1.0).unwrap(), vec![0.0]).unwrap();
        assert_eq!(act.hamiltonian_term(&[0.0, 2.0]), 2.0);
        assert_eq!(act.kinetic(&[0.0, 2.0]), 0.0);
    }

    #[test]
    fn midpoint_scheme() {
        let s = space(1, 3, 1.0);
        let act = DiscreteAction::new(s, Hamiltonian::zero(1), vec![0.0], KineticScheme::Midpoint).unwrap();
        // Q = (1, 2, 4), P = (1, 1, 1): (2 - 0)/2 + (4 - 1)/2 + (4 - 2)/2
        assert_eq!(act.kinetic(&[1.0, 2.0, 4.0, 1.0, 1.0, 1.0]), 3.5);
    }

    #[test]
    fn gradients_and_quadratic_forms_agree() {
        let cfg = FdConfig::default();
        for scheme in [KineticScheme::Forward, KineticScheme::Midpoint] {
            for h in [
                Hamiltonian::harmonic(2, 1.3, 0.7).unwrap(),
                Hamiltonian::anharmonic(2, 0.9, 0.2),
            ] {
                let act = DiscreteAction::new(space(2, 3, 0.8), h, vec![0.3, -0.1], scheme).unwrap();
                for x in fd::probe_points(act.dim(), 5, 1.0) {
                    let numeric = fd::gradient(|v| act.value(v), &x, cfg.step);
                    assert!(fd::max_rel_err(&act.gradient(&x), &numeric) < cfg.tol);
                    if let Some(q) = act.quadratic() {
                        assert!((q.value(&x) - act.value(&x)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn phase_has_unit_modulus() {
        let act = discretize_action(space(1, 4, 1.0), Hamiltonian::anharmonic(1, 1.0, 0.5), vec![0.2]).unwrap();
        let w = FeynmanWeight::new(act, InitialData::Unit, 0.1).unwrap();
        for x in fd::probe_points(8, 20, 3.0) {
            assert!((w.phase(&x).norm() - 1.0).abs() < 1e-14);
        }
    }

    fn scalar_weight(a: f64, eps: f64) -> FeynmanWeight {
        FeynmanWeight::from_action(Arc::new(QuadraticAction::scalar(a)), InitialData::Unit, eps, vec![], vec![]).unwrap()
    }

    #[test]
    fn one_dimensional_fresnel_examples() {
        let one = TestFunction::constant(1, 1.0);
        let w = scalar_weight(0.0, 0.3);
        let v = fresnel_closed_form(&w, &one).unwrap();
        assert!((v - Complex64::new((2.0 * PI / 0.3).sqrt(), 0.0)).norm() < 1e-12);

        for (a, eps) in [(1.0, 1.0), (-2.0, 0.1), (5.0, 0.01)] {
            let w = scalar_weight(a, eps);
            let closed = fresnel_closed_form(&w, &one).unwrap();
            let expected = (Complex64::new(2.0 * PI, 0.0) / Complex64::new(eps, -a)).sqrt();
            assert!((closed - expected).norm() < 1e-12 * expected.norm());
            let contour = fresnel_contour_quadrature(&w, &one, 40).unwrap();
            assert!((closed - contour).norm() < 1e-12 * expected.norm());
        }
    }

    #[test]
    fn closed_form_matches_direct_quadrature_in_one_dimension() {
        let phi = TestFunction::plane_wave(vec![0.6]);
        for (a, eps) in [(1.0, 1.0), (0.7, 0.1)] {
            let w = scalar_weight(a, eps);
            let closed = fresnel_closed_form(&w, &phi).unwrap();
            let half = (60.0 / eps).sqrt();
            let rule = Rule1d::composite_legendre(-half, half, 400, 10);
            let direct: Complex64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(x, wt)| phi.value(&[*x]) * w.undamped(&[*x]) * (-0.5 * eps * x * x).exp() * *wt)
                .sum();
            assert!((closed - direct).norm() < 1e-10 * closed.norm(), "{closed} vs {direct}");
        }
    }

    #[test]
    fn parity_kills_odd_test_functions() {
        let act = discretize_action(space(1, 2, 1.0), Hamiltonian::harmonic(1, 1.0, 1.0).unwrap(), vec![0.0]).unwrap();
        let w = FeynmanWeight::new(act, InitialData::Unit, 0.5).unwrap();
        let odd = TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![1, 0, 0, 0])], vec![0.0; 4], Some(1.0)).unwrap();
        let v = fresnel_pair(&w, &odd, &PairingEngine::gauss_hermite(20)).unwrap();
        assert_eq!(v.method, FresnelMethod::DampedQuadrature);
        assert!(v.value.norm() < 1e-10);
    }

    #[test]
    fn lattice_closed_form_matches_contour_quadrature() {
        let act = discretize_action(space(1, 2, 1.0), Hamiltonian::harmonic(1, 1.0, 1.0).unwrap(), vec![0.4]).unwrap();
        let phi = TestFunction::plane_wave(vec![0.3, -0.2, 0.5, 0.1]);
        for eps in [1.0, 0.1, 0.01] {
            let w = FeynmanWeight::new(act.clone(), InitialData::PlaneWave(vec![0.7]), eps).unwrap();
            let closed = fresnel_closed_form(&w, &phi).unwrap();
            let contour = fresnel_contour_quadrature(&w, &phi, 80).unwrap();
            assert!((closed - contour).norm() <= 1e-10 * closed.norm(), "eps {eps}: {closed} vs {contour}");
        }
    }

    #[test]
    fn damped_quadrature_matches_closed_form_at_moderate_epsilon() {
        let act = discretize_action(space(1, 1, 0.5), Hamiltonian::harmonic(1, 1.0, 1.0).unwrap(), vec![0.0]).unwrap();
        let w = FeynmanWeight::new(act, InitialData::Unit, 1.0).unwrap();
        let phi = TestFunction::plane_wave(vec![0.4, 0.2]);
        let closed = fresnel_closed_form(&w, &phi).unwrap();
        let quad = damped_pair_fn(&w, &PairingEngine::gauss_hermite(60), |x| phi.value(x) * w.undamped(x)).unwrap();
        assert!((closed - quad.value).norm() < 1e-10 * closed.norm());
    }

    #[test]
    fn large_non_quadratic_paths_are_refused() {
        let act = discretize_action(space(1, 7, 1.0), Hamiltonian::anharmonic(1, 1.0, 0.1), vec![0.0]).unwrap();
        let w = FeynmanWeight::new(act, InitialData::Unit, 1.0).unwrap();
        let one = TestFunction::constant(14, 1.0);
        assert!(matches!(
            fresnel_pair(&w, &one, &PairingEngine::gauss_hermite(3)),
            Err(Error::PathDimensionTooLarge { got: 14, max: 12 })
        ));
        let mc = fresnel_pair(&w, &one, &PairingEngine::monte_carlo(1000, 1, 2)).unwrap();
        assert_eq!(mc.method, FresnelMethod::MonteCarlo);
        assert!(FeynmanWeight::new(
            discretize_action(space(1, 1, 1.0), Hamiltonian::zero(1), vec![0.0]).unwrap(),
            InitialData::Unit,
            0.0
        )
        .is_err());
    }

    #[test]
    fn epsilon_sweep_converges() {
        let act = discretize_action(space(1, 2, 1.0), Hamiltonian::harmonic(1, 1.0, 1.0).unwrap(), vec![0.0]).unwrap();
        let w = FeynmanWeight::new(act, InitialData::Unit, 1.0).unwrap();
        let sweep = epsilon_sweep(&w, &TestFunction::plane_wave(vec![0.2, 0.1, 0.3, -0.4]), &[0.4, 0.2, 0.1, 0.05, 0.025]).unwrap();
        assert!(sweep.monotone, "{:?}", sweep.cauchy_differences);
    }

    fn identity_family(m: usize) -> TransformationFamily {
        TransformationFamily::base_flow(0, VectorField::identity(m))
    }

    #[test]
    fn anomaly_examples() {
        let s = space(1, 4, 1.0);
        let x = fd::probe_points(8, 1, 1.0).remove(0);
        assert_eq!(anomaly_term(&s, &identity_family(8), &[1.0], &x).unwrap(), 8.0);

        let translation = TransformationFamily::base_translation(8, 0);
        assert_eq!(anomaly_term(&s, &translation, &[1.0; 8], &x).unwrap(), 0.0);

        let desk = space(1, 1, 1.0);
        let family = TransformationFamily::base_flow(0, desk_generator(&desk));
        assert_eq!(anomaly_term(&desk, &family, &[1.0], &[1.0, 0.0]).unwrap(), 1.0);
        for p in fd::probe_points(2, 10, 2.0) {
            assert!((anomaly_term(&desk, &family, &[1.0], &p).unwrap() - p[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn anomaly_is_the_flat_log_derivative() {
        let desk = space(1, 3, 1.0);
        let k = desk_generator(&desk);
        let family = TransformationFamily::base_flow(0, k.clone());
        let flat = DensityMeasure::flat(6);
        for p in fd::probe_points(6, 8, 1.5) {
            let a = anomaly_term(&desk, &family, &[1.0], &p).unwrap();
            assert_eq!(a.to_bits(), log_derivative_along_field(&flat, &k, &p).unwrap().to_bits());
        }
    }

    #[test]
    fn desk_report() {
        let desk = space(1, 1, 1.0);
        let family = TransformationFamily::base_flow(0, desk_generator(&desk));
        let weight = FeynmanWeight::from_action(Arc::new(BlockProductAction::new(desk)), InitialData::Unit, 1.0, vec![], vec![]).unwrap();
        let probes = fd::probe_points(2, 25, 2.0);
        let phi = TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![0, 0])], vec![0.3, -0.2], Some(1.0)).unwrap();
        let engine = PairingEngine::gauss_hermite(60);
        let report = anomaly_report(
            &family,
            &[1.0],
            &weight,
            &probes,
            1e-12,
            Some(CorollaryProbe {
                phi: &phi,
                engine: &engine,
                step: 1e-4,
                tol: 1e-7,
            }),
        )
        .unwrap();
        assert_eq!(report.status, CorollaryStatus::Applicable);
        assert!(report.max_action_derivative <= 1e-12);
        assert!(report.max_fd_trace_err <= 1e-8);
        for s in &report.samples {
            assert!((s.anomaly - s.path[0]).abs() < 1e-14);
        }
        let c = report.corollary.unwrap();
        assert!(c.pass, "{c:?}");
        assert!((c.predicted - (c.anomaly_part + c.regularization_part)).norm() < 1e-10);
    }

    #[test]
    fn scaling_family_with_generic_hamiltonian_is_inapplicable() {
        let s = space(1, 2, 1.0);
        let act = discretize_action(s, Hamiltonian::anharmonic(1, 1.0, 0.3), vec![0.0]).unwrap();
        let w = FeynmanWeight::new(act, InitialData::Unit, 1.0).unwrap();
        let report = anomaly_report(&identity_family(4), &[1.0], &w, &fd::probe_points(4, 10, 1.0), 1e-10, None).unwrap();
        assert_eq!(report.status, CorollaryStatus::Inapplicable);
    }

    #[test]
    fn refinement_doubles() {
        let report = anomaly_refinement(&[4, 8, 16], |n| {
            let s = LatticePathSpace::new(1, n, 1.0)?;
            let family = TransformationFamily::base_flow(0, desk_generator(&s));
            Ok((s, family, vec![1.0; s.dim()]))
        })
        .unwrap();
        assert_eq!(report.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![8, 16, 32]);
        assert_eq!(report.ratios, vec![2.0, 2.0]);
    }
}

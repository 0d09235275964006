//! Lagrangian-weighted measures under parametric transformation families.
//!
//! A family `F(z, x, r, α) = (x_z, r_z)` acts on the graph of a field
//! configuration `g: R^n -> R^m`. The transformed measure is
//! `L(·, g_z(·), g_z'(·)) ν_z` with `ν_z` the pushforward of `ν` by the base
//! part of `F`. This module evaluates the five-term density of its
//! `z`-derivative (in both index variants), the finite-difference oracle for
//! that derivative, and the pointwise Noether residual.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fd::{self, FdConfig};
use crate::measure::{log_derivative_along_vector, DensityMeasure, MatrixFn, TestFunction, VectorField, VectorFn};
use crate::pairing::{pair_fn, PairingEngine};

pub type LagrangianFn = Arc<dyn Fn(&[f64], &[f64], &DMatrix<f64>) -> f64 + Send + Sync>;
pub type LagrangianGradFn = Arc<dyn Fn(&[f64], &[f64], &DMatrix<f64>) -> Vec<f64> + Send + Sync>;
pub type LagrangianMatrixFn = Arc<dyn Fn(&[f64], &[f64], &DMatrix<f64>) -> DMatrix<f64> + Send + Sync>;
/// `(z, x, r, α) ↦ (x_z, r_z)`.
pub type FamilyMapFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) + Send + Sync>;
/// `(z, x, r, α) ↦ ∂(x_z, r_z)/∂(x, r)`, an `(n+m) × (n+m)` matrix.
pub type FamilyJacobianFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &DMatrix<f64>) -> DMatrix<f64> + Send + Sync>;
/// `(x, r, α) ↦ ∂F/∂z` at `z = 0`, an `(n+m) × p` matrix.
pub type GeneratorFn = Arc<dyn Fn(&[f64], &[f64], &DMatrix<f64>) -> DMatrix<f64> + Send + Sync>;
/// `(Δ, x, r, α) ↦ ∂(∂F/∂z · Δ)/∂(x, r)` at `z = 0`.
pub type GeneratorJacobianFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &DMatrix<f64>) -> DMatrix<f64> + Send + Sync>;

const VALIDATION_PROBES: usize = 6;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;

/// `L(x, r, α)` with its partial derivatives.
#[derive(Clone)]
pub struct LagrangianDensity {
    n: usize,
    m: usize,
    value: LagrangianFn,
    d_x: LagrangianGradFn,
    d_r: LagrangianGradFn,
    d_alpha: LagrangianMatrixFn,
    label: String,
}

impl fmt::Debug for LagrangianDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LagrangianDensity({}, n={}, m={})", self.label, self.n, self.m)
    }
}

fn probe_alpha(m: usize, n: usize, seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |i, j| 0.5 * (seed[(i + 2 * j) % seed.len()] + 0.1 * (i as f64 - j as f64)))
}

/// Probe triples `(x, r, α)` for derivative validation.
fn probe_states(n: usize, m: usize) -> Vec<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    fd::probe_points(n + m + 1, VALIDATION_PROBES, 1.2)
        .into_iter()
        .map(|p| {
            let x = p[..n].to_vec();
            let r = p[n..n + m].to_vec();
            let alpha = probe_alpha(m, n, &p);
            (x, r, alpha)
        })
        .collect()
}

impl LagrangianDensity {
    pub fn new(
        n: usize,
        m: usize,
        value: LagrangianFn,
        d_x: LagrangianGradFn,
        d_r: LagrangianGradFn,
        d_alpha: LagrangianMatrixFn,
        fd_cfg: FdConfig,
    ) -> Result<Self> {
        let l = Self {
            n,
            m,
            value,
            d_x,
            d_r,
            d_alpha,
            label: "custom".into(),
        };
        l.validate(fd_cfg)?;
        Ok(l)
    }

    /// `L ≡ 1`.
    pub fn unit(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            value: Arc::new(|_, _, _| 1.0),
            d_x: Arc::new(move |_, _, _| vec![0.0; n]),
            d_r: Arc::new(move |_, _, _| vec![0.0; m]),
            d_alpha: Arc::new(move |_, _, _| DMatrix::zeros(m, n)),
            label: "unit".into(),
        }
    }

    /// `L = |r|^2`.
    pub fn field_square(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            value: Arc::new(|_, r, _| r.iter().map(|v| v * v).sum()),
            d_x: Arc::new(move |_, _, _| vec![0.0; n]),
            d_r: Arc::new(|_, r, _| r.iter().map(|v| 2.0 * v).collect()),
            d_alpha: Arc::new(move |_, _, _| DMatrix::zeros(m, n)),
            label: "field-square".into(),
        }
    }

    /// `L = sum_i r_i`.
    pub fn field_sum(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            value: Arc::new(|_, r, _| r.iter().sum()),
            d_x: Arc::new(move |_, _, _| vec![0.0; n]),
            d_r: Arc::new(move |_, _, _| vec![1.0; m]),
            d_alpha: Arc::new(move |_, _, _| DMatrix::zeros(m, n)),
            label: "field-sum".into(),
        }
    }

    /// `L = exp(-|x|^2)`.
    pub fn radial_gaussian(n: usize, m: usize) -> Self {
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        Self {
            n,
            m,
            value: Arc::new(move |x, _, _| (-sq(x)).exp()),
            d_x: Arc::new(move |x, _, _| {
                let e = (-sq(x)).exp();
                x.iter().map(|v| -2.0 * v * e).collect()
            }),
            d_r: Arc::new(move |_, _, _| vec![0.0; m]),
            d_alpha: Arc::new(move |_, _, _| DMatrix::zeros(m, n)),
            label: "radial-gaussian".into(),
        }
    }

    /// `L = |α|^2 / 2 - |r|^2 / 2`, a free field.
    pub fn free_field(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            value: Arc::new(|_, r, a| 0.5 * a.norm_squared() - 0.5 * r.iter().map(|v| v * v).sum::<f64>()),
            d_x: Arc::new(move |_, _, _| vec![0.0; n]),
            d_r: Arc::new(|_, r, _| r.iter().map(|v| -v).collect()),
            d_alpha: Arc::new(|_, _, a| a.clone()),
            label: "free-field".into(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> f64 {
        (self.value)(x, r, alpha)
    }

    pub fn d_x(&self, x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> Vec<f64> {
        (self.d_x)(x, r, alpha)
    }

    pub fn d_r(&self, x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> Vec<f64> {
        (self.d_r)(x, r, alpha)
    }

    pub fn d_alpha(&self, x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> DMatrix<f64> {
        (self.d_alpha)(x, r, alpha)
    }

    pub fn validate(&self, fd_cfg: FdConfig) -> Result<()> {
        let (n, m) = (self.n, self.m);
        for (x, r, alpha) in probe_states(n, m) {
            let ax = self.d_x(&x, &r, &alpha);
            let ar = self.d_r(&x, &r, &alpha);
            let aa = self.d_alpha(&x, &r, &alpha);
            check_dim("L_x", n, ax.len())?;
            check_dim("L_r", m, ar.len())?;
            check_dim("L_alpha rows", m, aa.nrows())?;
            check_dim("L_alpha cols", n, aa.ncols())?;
            let nx = fd::gradient(|v| self.value(v, &r, &alpha), &x, fd_cfg.step);
            let nr = fd::gradient(|v| self.value(&x, v, &alpha), &r, fd_cfg.step);
            let na = fd::gradient(
                |v| self.value(&x, &r, &DMatrix::from_column_slice(m, n, v)),
                alpha.as_slice(),
                fd_cfg.step,
            );
            let errs = [
                ("lagrangian d_x", fd::max_rel_err(&ax, &nx)),
                ("lagrangian d_r", fd::max_rel_err(&ar, &nr)),
                ("lagrangian d_alpha", fd::max_rel_err(aa.as_slice(), &na)),
            ];
            for (what, err) in errs {
                if !err.is_finite() || err > fd_cfg.tol {
                    return Err(Error::DerivativeMismatch {
                        what,
                        point: x.clone(),
                        rel_err: err,
                        tol: fd_cfg.tol,
                    });
                }
            }
        }
        Ok(())
    }
}

/// A map `g: R^n -> R^m` with derivative `g'` (an `m × n` matrix).
#[derive(Clone)]
pub struct FieldConfiguration {
    n: usize,
    m: usize,
    g: VectorFn,
    g_prime: MatrixFn,
    label: String,
}

impl fmt::Debug for FieldConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldConfiguration({}, n={}, m={})", self.label, self.n, self.m)
    }
}

impl FieldConfiguration {
    pub fn new(n: usize, m: usize, g: VectorFn, g_prime: MatrixFn, fd_cfg: FdConfig) -> Result<Self> {
        let c = Self {
            n,
            m,
            g,
            g_prime,
            label: "custom".into(),
        };
        c.validate(fd_cfg)?;
        Ok(c)
    }

    pub(crate) fn from_parts(n: usize, m: usize, g: VectorFn, g_prime: MatrixFn, label: String) -> Self {
        Self {
            n,
            m,
            g,
            g_prime,
            label,
        }
    }

    pub fn constant(n: usize, value: Vec<f64>) -> Self {
        let m = value.len();
        Self {
            n,
            m,
            g: Arc::new(move |_| value.clone()),
            g_prime: Arc::new(move |_| DMatrix::zeros(m, n)),
            label: "constant".into(),
        }
    }

    /// `g(x) = B x + c`.
    pub fn affine(b: DMatrix<f64>, c: Vec<f64>) -> Result<Self> {
        check_dim("affine offset", b.nrows(), c.len())?;
        let (m, n) = (b.nrows(), b.ncols());
        let b1 = b.clone();
        Ok(Self {
            n,
            m,
            g: Arc::new(move |x: &[f64]| {
                (&b1 * DVector::from_column_slice(x) + DVector::from_column_slice(&c))
                    .as_slice()
                    .to_vec()
            }),
            g_prime: Arc::new(move |_| b.clone()),
            label: "affine".into(),
        })
    }

    /// `g(x) = x^2` on `R -> R`.
    pub fn square_1d() -> Self {
        Self {
            n: 1,
            m: 1,
            g: Arc::new(|x: &[f64]| vec![x[0] * x[0]]),
            g_prime: Arc::new(|x: &[f64]| DMatrix::from_element(1, 1, 2.0 * x[0])),
            label: "square".into(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn g(&self, x: &[f64]) -> Vec<f64> {
        (self.g)(x)
    }

    pub fn g_prime(&self, x: &[f64]) -> DMatrix<f64> {
        (self.g_prime)(x)
    }

    pub fn validate(&self, fd_cfg: FdConfig) -> Result<()> {
        for p in fd::probe_points(self.n, VALIDATION_PROBES, 1.5) {
            let analytic = self.g_prime(&p);
            check_dim("g' rows", self.m, analytic.nrows())?;
            check_dim("g' cols", self.n, analytic.ncols())?;
            let numeric = fd::jacobian(|x| self.g(x), &p, fd_cfg.step);
            let err = fd::max_rel_err_matrix(&analytic, &numeric);
            if !err.is_finite() || err > fd_cfg.tol {
                return Err(Error::DerivativeMismatch {
                    what: "field configuration derivative",
                    point: p,
                    rel_err: err,
                    tol: fd_cfg.tol,
                });
            }
        }
        Ok(())
    }
}

/// A parametric family of transformations of `E × G`.
#[derive(Clone)]
pub struct TransformationFamily {
    p: usize,
    n: usize,
    m: usize,
    map: FamilyMapFn,
    state_jacobian: Option<FamilyJacobianFn>,
    generator: GeneratorFn,
    generator_jacobian: Option<GeneratorJacobianFn>,
    alpha_dependent: bool,
    label: String,
}

impl fmt::Debug for TransformationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransformationFamily({}, p={}, n={}, m={})", self.label, self.p, self.n, self.m)
    }
}

/// Builder-style description of a family; analytic Jacobians are optional.
pub struct FamilySpec {
    pub p: usize,
    pub n: usize,
    pub m: usize,
    pub map: FamilyMapFn,
    pub generator: GeneratorFn,
    pub state_jacobian: Option<FamilyJacobianFn>,
    pub generator_jacobian: Option<GeneratorJacobianFn>,
    pub alpha_dependent: bool,
    pub label: String,
}

impl TransformationFamily {
    /// Validates `F(0, ·) = id` and every supplied derivative against finite differences.
    pub fn new(spec: FamilySpec, fd_cfg: FdConfig) -> Result<Self> {
        let fam = Self {
            p: spec.p,
            n: spec.n,
            m: spec.m,
            map: spec.map,
            state_jacobian: spec.state_jacobian,
            generator: spec.generator,
            generator_jacobian: spec.generator_jacobian,
            alpha_dependent: spec.alpha_dependent,
            label: spec.label,
        };
        fam.validate(fd_cfg)?;
        Ok(fam)
    }

    /// `F(z, x, r, α) = (x, r)` for every `z`.
    pub fn identity(p: usize, n: usize, m: usize) -> Self {
        let dim = n + m;
        Self {
            p,
            n,
            m,
            map: Arc::new(|_, x, r, _| (x.to_vec(), r.to_vec())),
            state_jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::identity(dim, dim))),
            generator: Arc::new(move |_, _, _| DMatrix::zeros(dim, p)),
            generator_jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::zeros(dim, dim))),
            alpha_dependent: false,
            label: "identity-family".into(),
        }
    }

    /// `F(z, x, r, α) = (x + z, r)`, with `p = n`.
    pub fn base_translation(n: usize, m: usize) -> Self {
        let dim = n + m;
        Self {
            p: n,
            n,
            m,
            map: Arc::new(|z, x, r, _| (x.iter().zip(z).map(|(a, b)| a + b).collect(), r.to_vec())),
            state_jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::identity(dim, dim))),
            generator: Arc::new(move |_, _, _| DMatrix::from_fn(dim, n, |i, j| if i == j { 1.0 } else { 0.0 })),
            generator_jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::zeros(dim, dim))),
            alpha_dependent: false,
            label: "base-translation".into(),
        }
    }

    /// `F(z, x, r, α) = (x, r + z)`, with `p = m`.
    pub fn field_shift(n: usize, m: usize) -> Self {
        let dim = n + m;
        Self {
            p: m,
            n,
            m,
            map: Arc::new(|z, x, r, _| (x.to_vec(), r.iter().zip(z).map(|(a, b)| a + b).collect())),
            state_jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::identity(dim, dim))),
            generator: Arc::new(move |_, _, _| DMatrix::from_fn(dim, m, |i, j| if i == n + j { 1.0 } else { 0.0 })),
            generator_jacobian: Some(Arc::new(move |_, _, _, _| DMatrix::zeros(dim, dim))),
            alpha_dependent: false,
            label: "field-shift".into(),
        }
    }

    /// `F(z, x, r, α) = (x, r + z s(x))` with `p = 1`; `s'` is the `m × n` Jacobian of `s`.
    pub fn field_source(n: usize, m: usize, s: VectorFn, s_prime: MatrixFn) -> Self {
        let dim = n + m;
        let s1 = s.clone();
        Self {
            p: 1,
            n,
            m,
            map: Arc::new(move |z, x, r, _| {
                let sx = s(x);
                (x.to_vec(), r.iter().zip(&sx).map(|(a, b)| a + z[0] * b).collect())
            }),
            state_jacobian: Some({
                let sp = s_prime.clone();
                Arc::new(move |z, x, _, _| {
                    let mut j = DMatrix::identity(dim, dim);
                    let d = sp(x) * z[0];
                    j.view_mut((n, 0), (m, n)).copy_from(&d);
                    j
                })
            }),
            generator: Arc::new(move |x, _, _| {
                let mut g = DMatrix::zeros(dim, 1);
                for (i, v) in s1(x).into_iter().enumerate() {
                    g[(n + i, 0)] = v;
                }
                g
            }),
            generator_jacobian: Some(Arc::new(move |delta, x, _, _| {
                let mut j = DMatrix::zeros(dim, dim);
                j.view_mut((n, 0), (m, n)).copy_from(&(s_prime(x) * delta[0]));
                j
            })),
            alpha_dependent: false,
            label: "field-source".into(),
        }
    }

    /// Rotation of the base plane, `F(z, x, r, α) = (R_z x, r)` with `n = 2`, `p = 1`.
    pub fn base_rotation(m: usize) -> Self {
        let dim = 2 + m;
        let rot = |t: f64| {
            let (s, c) = t.sin_cos();
            (c, s)
        };
        Self {
            p: 1,
            n: 2,
            m,
            map: Arc::new(move |z, x, r, _| {
                let (c, s) = rot(z[0]);
                (vec![c * x[0] - s * x[1], s * x[0] + c * x[1]], r.to_vec())
            }),
            state_jacobian: Some(Arc::new(move |z, _, _, _| {
                let (c, s) = rot(z[0]);
                let mut j = DMatrix::identity(dim, dim);
                j[(0, 0)] = c;
                j[(0, 1)] = -s;
                j[(1, 0)] = s;
                j[(1, 1)] = c;
                j
            })),
            generator: Arc::new(move |x, _, _| {
                let mut g = DMatrix::zeros(dim, 1);
                g[(0, 0)] = -x[1];
                g[(1, 0)] = x[0];
                g
            }),
            generator_jacobian: Some(Arc::new(move |delta, _, _, _| {
                let mut j = DMatrix::zeros(dim, dim);
                j[(0, 1)] = -delta[0];
                j[(1, 0)] = delta[0];
                j
            })),
            alpha_dependent: false,
            label: "base-rotation".into(),
        }
    }

    /// Dilation of the base, `F(z, x, r, α) = (e^z x, r)` with `p = 1`.
    pub fn base_scaling(n: usize, m: usize) -> Self {
        let dim = n + m;
        Self {
            p: 1,
            n,
            m,
            map: Arc::new(|z, x, r, _| (x.iter().map(|v| v * z[0].exp()).collect(), r.to_vec())),
            state_jacobian: Some(Arc::new(move |z, _, _, _| {
                let mut j = DMatrix::identity(dim, dim);
                for i in 0..n {
                    j[(i, i)] = z[0].exp();
                }
                j
            })),
            generator: Arc::new(move |x, _, _| {
                let mut g = DMatrix::zeros(dim, 1);
                for i in 0..n {
                    g[(i, 0)] = x[i];
                }
                g
            }),
            generator_jacobian: Some(Arc::new(move |delta, _, _, _| {
                let mut j = DMatrix::zeros(dim, dim);
                for i in 0..n {
                    j[(i, i)] = delta[0];
                }
                j
            })),
            alpha_dependent: false,
            label: "base-scaling".into(),
        }
    }

    /// `F(z, x, r, α) = (x + z k(x), r)` with `p = 1`.
    pub fn base_flow(m: usize, k: VectorField) -> Self {
        let n = k.dim();
        let dim = n + m;
        let (k1, k2, k3) = (k.clone(), k.clone(), k.clone());
        let label = format!("flow[{}]", k.label());
        Self {
            p: 1,
            n,
            m,
            map: Arc::new(move |z, x, r, _| {
                let kx = k1.value(x);
                (x.iter().zip(&kx).map(|(a, b)| a + z[0] * b).collect(), r.to_vec())
            }),
            state_jacobian: Some(Arc::new(move |z, x, _, _| {
                let mut j = DMatrix::identity(dim, dim);
                let kp = k2.jacobian(x) * z[0];
                let mut top = j.view_mut((0, 0), (n, n));
                top += kp;
                j
            })),
            generator: Arc::new(move |x, _, _| {
                let mut g = DMatrix::zeros(dim, 1);
                for (i, v) in k3.value(x).into_iter().enumerate() {
                    g[(i, 0)] = v;
                }
                g
            }),
            generator_jacobian: Some(Arc::new(move |delta, x, _, _| {
                let mut j = DMatrix::zeros(dim, dim);
                j.view_mut((0, 0), (n, n)).copy_from(&(k.jacobian(x) * delta[0]));
                j
            })),
            alpha_dependent: false,
            label,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn param_dim(&self) -> usize {
        self.p
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_alpha_dependent(&self) -> bool {
        self.alpha_dependent
    }

    pub fn apply(&self, z: &[f64], x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        (self.map)(z, x, r, alpha)
    }

    /// `∂F/∂z` at `z = 0`, split into its `E` rows and `G` rows.
    pub fn generator(&self, x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> DMatrix<f64> {
        (self.generator)(x, r, alpha)
    }

    fn state_jacobian(&self, z: &[f64], x: &[f64], r: &[f64], alpha: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.state_jacobian {
            Some(j) => j(z, x, r, alpha),
            None => {
                let n = self.n;
                let mut xr = x.to_vec();
                xr.extend_from_slice(r);
                fd::jacobian(
                    |v| {
                        let (a, b) = self.apply(z, &v[..n], &v[n..], alpha);
                        [a, b].concat()
                    },
                    &xr,
                    1e-6,
                )
            }
        }
    }

    fn validate(&self, fd_cfg: FdConfig) -> Result<()> {
        let (n, m, p) = (self.n, self.m, self.p);
        let zero = vec![0.0; p];
        for (x, r, alpha) in probe_states(n, m) {
            let (x0, r0) = self.apply(&zero, &x, &r, &alpha);
            check_dim("family E-part", n, x0.len())?;
            check_dim("family G-part", m, r0.len())?;
            let err = x0
                .iter()
                .zip(&x)
                .chain(r0.iter().zip(&r))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err > 1e-12 {
                return Err(Error::Invalid(format!(
                    "family is not the identity at z = 0 (error {err:.3e} at x = {x:?})"
                )));
            }
            let generator = self.generator(&x, &r, &alpha);
            check_dim("generator rows", n + m, generator.nrows())?;
            check_dim("generator cols", p, generator.ncols())?;
            let numeric = fd::jacobian(
                |z| {
                    let (a, b) = self.apply(z, &x, &r, &alpha);
                    [a, b].concat()
                },
                &zero,
                fd_cfg.step,
            );
            self.check("family z-derivative", &generator, &numeric, &x, fd_cfg)?;

            let mut xr = x.clone();
            xr.extend_from_slice(&r);
            if let Some(j) = &self.state_jacobian {
                let z_probe: Vec<f64> = (0..p).map(|i| 0.05 * (i as f64 + 1.0)).collect();
                let analytic = j(&z_probe, &x, &r, &alpha);
                let numeric = fd::jacobian(
                    |v| {
                        let (a, b) = self.apply(&z_probe, &v[..n], &v[n..], &alpha);
                        [a, b].concat()
                    },
                    &xr,
                    fd_cfg.step,
                );
                self.check("family state jacobian", &analytic, &numeric, &x, fd_cfg)?;
            }
            if let Some(j) = &self.generator_jacobian {
                let delta: Vec<f64> = (0..p).map(|i| 1.0 - 0.3 * i as f64).collect();
                let analytic = j(&delta, &x, &r, &alpha);
                let numeric = fd::jacobian(
                    |v| {
                        (self.generator(&v[..n], &v[n..], &alpha) * DVector::from_column_slice(&delta))
                            .as_slice()
                            .to_vec()
                    },
                    &xr,
                    fd_cfg.step,
                );
                self.check("generator jacobian", &analytic, &numeric, &x, fd_cfg)?;
            }
        }
        Ok(())
    }

    fn check(&self, what: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>, x: &[f64], fd_cfg: FdConfig) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: b.len(),
                got: a.len(),
            });
        }
        let err = fd::max_rel_err_matrix(a, b);
        if !err.is_finite() || err > fd_cfg.tol {
            return Err(Error::DerivativeMismatch {
                what,
                point: x.to_vec(),
                rel_err: err,
                tol: fd_cfg.tol,
            });
        }
        Ok(())
    }
}

/// Everything that defines `z ↦ L(·, g_z, g_z') ν_z`.
#[derive(Debug, Clone)]
pub struct NoetherSetup {
    pub lagrangian: LagrangianDensity,
    pub field: FieldConfiguration,
    pub family: TransformationFamily,
    pub measure: DensityMeasure,
}

impl NoetherSetup {
    pub fn new(
        lagrangian: LagrangianDensity,
        field: FieldConfiguration,
        family: TransformationFamily,
        measure: DensityMeasure,
    ) -> Result<Self> {
        let (n, m) = lagrangian.dims();
        check_dim("field configuration n", n, field.dims().0)?;
        check_dim("field configuration m", m, field.dims().1)?;
        check_dim("family n", n, family.dims().0)?;
        check_dim("family m", m, family.dims().1)?;
        check_dim("measure dimension", n, measure.dim())?;
        Ok(Self {
            lagrangian,
            field,
            family,
            measure,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.lagrangian.dims()
    }

    /// `(X_z(x), R_z(x))` along the graph of `g`.
    fn graph_image(&self, z: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.family
            .apply(z, x, &self.field.g(x), &self.field.g_prime(x))
    }

    /// Total `x`-derivatives `(X_z'(x), R_z'(x))` along the graph of `g`.
    fn graph_jacobian(&self, z: &[f64], x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = self.dims();
        let total = if self.family.is_alpha_dependent() {
            fd::jacobian(
                |v| {
                    let (a, b) = self.graph_image(z, v);
                    [a, b].concat()
                },
                x,
                1e-6,
            )
        } else {
            let gp = self.field.g_prime(x);
            let j = self.family.state_jacobian(z, x, &self.field.g(x), &gp);
            j.columns(0, n) + j.columns(n, m) * gp
        };
        (total.rows(0, n).into_owned(), total.rows(n, m).into_owned())
    }
}

/// The variation fields `h1 = (∂_z F_E)Δ`, `h2 = (∂_z F_G)Δ` along the
/// graph of `g`, and `h3 = h2'`.
#[derive(Clone)]
pub struct VariationFields {
    setup: Arc<NoetherSetup>,
    delta: Vec<f64>,
}

impl fmt::Debug for VariationFields {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VariationFields(Δ = {:?})", self.delta)
    }
}

pub fn variation_fields(setup: &NoetherSetup, delta: &[f64]) -> Result<VariationFields> {
    check_dim("Δ", setup.family.param_dim(), delta.len())?;
    Ok(VariationFields {
        setup: Arc::new(setup.clone()),
        delta: delta.to_vec(),
    })
}

impl VariationFields {
    fn generator_column(&self, x: &[f64]) -> Vec<f64> {
        let s = &self.setup;
        let gen = s.family.generator(x, &s.field.g(x), &s.field.g_prime(x));
        (gen * DVector::from_column_slice(&self.delta)).as_slice().to_vec()
    }

    pub fn h1(&self, x: &[f64]) -> Vec<f64> {
        let n = self.setup.dims().0;
        self.generator_column(x)[..n].to_vec()
    }

    pub fn h2(&self, x: &[f64]) -> Vec<f64> {
        let n = self.setup.dims().0;
        self.generator_column(x)[n..].to_vec()
    }

    /// Total `x`-derivative of `(h1, h2)`, an `(n+m) × n` matrix.
    fn generator_total_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let s = &self.setup;
        let (n, m) = s.dims();
        match (&s.family.generator_jacobian, s.family.is_alpha_dependent()) {
            (Some(j), false) => {
                let gp = s.field.g_prime(x);
                let jac = j(&self.delta, x, &s.field.g(x), &gp);
                jac.columns(0, n) + jac.columns(n, m) * gp
            }
            _ => fd::jacobian(|v| self.generator_column(v), x, 1e-5),
        }
    }

    /// `h1'(x)`, an `n × n` matrix.
    pub fn h1_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.setup.dims().0;
        self.generator_total_jacobian(x).rows(0, n).into_owned()
    }

    /// `h3(x) = h2'(x)`, an `m × n` matrix.
    pub fn h3(&self, x: &[f64]) -> DMatrix<f64> {
        let (n, m) = self.setup.dims();
        self.generator_total_jacobian(x).rows(n, m).into_owned()
    }

    /// `h1` as a vector field on `E`.
    pub fn h1_field(&self) -> VectorField {
        let n = self.setup.dims().0;
        let a = self.clone();
        let b = self.clone();
        VectorField::from_parts(
            n,
            Arc::new(move |x: &[f64]| a.h1(x)),
            Arc::new(move |x: &[f64]| b.h1_jacobian(x)),
            format!("h1[{}]", self.setup.family.label()),
        )
    }

    /// `h2` as a map `E -> G` with derivative `h3`.
    pub fn h2_configuration(&self) -> FieldConfiguration {
        let (n, m) = self.setup.dims();
        let a = self.clone();
        let b = self.clone();
        FieldConfiguration::from_parts(
            n,
            m,
            Arc::new(move |x: &[f64]| a.h2(x)),
            Arc::new(move |x: &[f64]| b.h3(x)),
            format!("h2[{}]", self.setup.family.label()),
        )
    }
}

/// The field `g_z` whose graph is the image of the graph of `g` under `F(z)`.
#[derive(Clone)]
pub struct TransformedField {
    setup: Arc<NoetherSetup>,
    z: Vec<f64>,
}

impl TransformedField {
    /// `(g_z(y), g_z'(y))`, inverting the base map by damped Newton iteration from `y`.
    pub fn eval(&self, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if self.z.iter().all(|v| *v == 0.0) {
            return Ok((self.setup.field.g(y), self.setup.field.g_prime(y)));
        }
        let x = self.preimage(y)?;
        let (_, r) = self.setup.graph_image(&self.z, &x);
        let (jx, jr) = self.setup.graph_jacobian(&self.z, &x);
        let inv = jx.clone().try_inverse().ok_or_else(|| Error::GraphCondition {
            point: x.clone(),
            det: jx.determinant(),
        })?;
        Ok((r, jr * inv))
    }

    /// The `x` with `X_z(x) = y`.
    pub fn preimage(&self, y: &[f64]) -> Result<Vec<f64>> {
        let setup = &self.setup;
        let residual_at = |x: &DVector<f64>| {
            DVector::from_vec(setup.graph_image(&self.z, x.as_slice()).0) - DVector::from_column_slice(y)
        };
        let mut x = DVector::from_column_slice(y);
        let mut res = residual_at(&x);
        let scale = y.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for _ in 0..NEWTON_MAX_ITER {
            if res.amax() <= NEWTON_TOL * scale {
                return Ok(x.as_slice().to_vec());
            }
            let (jx, _) = setup.graph_jacobian(&self.z, x.as_slice());
            let step = jx.clone().lu().solve(&res).ok_or_else(|| Error::GraphCondition {
                point: x.as_slice().to_vec(),
                det: jx.determinant(),
            })?;
            // halve the step until the residual decreases
            let mut lambda = 1.0;
            loop {
                let trial = &x - &step * lambda;
                let trial_res = residual_at(&trial);
                if trial_res.amax() < res.amax() || lambda < 1e-6 {
                    x = trial;
                    res = trial_res;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if res.amax() <= NEWTON_TOL * scale {
            return Ok(x.as_slice().to_vec());
        }
        Err(Error::NewtonDivergence {
            point: y.to_vec(),
            iterations: NEWTON_MAX_ITER,
            residual: res.amax(),
        })
    }

    /// Plain [`FieldConfiguration`]; evaluation failures come back as NaN.
    pub fn into_configuration(self) -> FieldConfiguration {
        let (n, m) = self.setup.dims();
        let a = self.clone();
        let b = self.clone();
        FieldConfiguration::from_parts(
            n,
            m,
            Arc::new(move |y: &[f64]| a.eval(y).map(|v| v.0).unwrap_or_else(|_| vec![f64::NAN; m])),
            Arc::new(move |y: &[f64]| {
                b.eval(y)
                    .map(|v| v.1)
                    .unwrap_or_else(|_| DMatrix::from_element(m, n, f64::NAN))
            }),
            format!("g_z[{}]", self.setup.family.label()),
        )
    }
}

/// Checks the graph condition (`det X_z' > 0`) on `probes` and returns `g_z`.
pub fn transformed_field(setup: &NoetherSetup, z: &[f64], probes: &[Vec<f64>]) -> Result<TransformedField> {
    check_dim("z", setup.family.param_dim(), z.len())?;
    for x in probes {
        check_dim("probe point", setup.dims().0, x.len())?;
        let det = setup.graph_jacobian(z, x).0.determinant();
        if !(det > 0.0) {
            return Err(Error::GraphCondition { point: x.clone(), det });
        }
    }
    Ok(TransformedField {
        setup: Arc::new(setup.clone()),
        z: z.to_vec(),
    })
}

/// `L(·, g_z, g_z') ν_z`, paired in base coordinates:
/// `φ ↦ ∫ φ(X_z(x)) L(X_z(x), R_z(x), R_z'(x) X_z'(x)^{-1}) dν(x)`.
#[derive(Debug, Clone)]
pub struct FamilyMeasure<'a> {
    setup: &'a NoetherSetup,
    z: Vec<f64>,
}

pub fn family_measure<'a>(setup: &'a NoetherSetup, z: &[f64]) -> Result<FamilyMeasure<'a>> {
    check_dim("z", setup.family.param_dim(), z.len())?;
    Ok(FamilyMeasure {
        setup,
        z: z.to_vec(),
    })
}

impl FamilyMeasure<'_> {
    /// Density factor and transported point at base point `x`.
    fn weight_at(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let s = self.setup;
        if self.z.iter().all(|v| *v == 0.0) {
            let w = s.lagrangian.value(x, &s.field.g(x), &s.field.g_prime(x));
            return (x.to_vec(), w);
        }
        let (xz, rz) = s.graph_image(&self.z, x);
        let (jx, jr) = s.graph_jacobian(&self.z, x);
        let w = match jx.try_inverse() {
            Some(inv) => s.lagrangian.value(&xz, &rz, &(jr * inv)),
            None => f64::NAN,
        };
        (xz, w)
    }

    pub fn pair(&self, phi: &TestFunction, engine: &PairingEngine) -> Result<Complex64> {
        check_dim("test function", self.setup.dims().0, phi.dim())?;
        self.pair_fn(engine, |y| phi.value(y))
    }

    pub fn pair_fn<F>(&self, engine: &PairingEngine, phi: F) -> Result<Complex64>
    where
        F: Fn(&[f64]) -> Complex64 + Sync,
    {
        let v = pair_fn(&self.setup.measure, engine, |x| {
            let (y, w) = self.weight_at(x);
            if w == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                phi(&y) * w
            }
        })?;
        Ok(v.value)
    }
}

/// Index convention for the last two terms of the five-term formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem1Variant {
    /// `tr h3` and `β^ν(h2(x), x)`; needs `dim G = dim E`.
    PaperLiteral,
    /// `tr h1'` and `β^ν(h1(x), x)`.
    TransportCorrected,
}

impl Theorem1Variant {
    pub const ALL: [Theorem1Variant; 2] = [Theorem1Variant::PaperLiteral, Theorem1Variant::TransportCorrected];

    pub fn name(self) -> &'static str {
        match self {
            Theorem1Variant::PaperLiteral => "paper_literal",
            Theorem1Variant::TransportCorrected => "transport_corrected",
        }
    }
}

/// The five terms `L_x h1, L_r h2, L_α : h2', L tr(·), L β^ν(·, x)` and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1Terms {
    pub terms: [f64; 5],
    pub total: f64,
}

pub fn theorem1_evaluate(
    setup: &NoetherSetup,
    delta: &[f64],
    x: &[f64],
    variant: Theorem1Variant,
) -> Result<Theorem1Terms> {
    let (n, m) = setup.dims();
    if variant == Theorem1Variant::PaperLiteral && n != m {
        return Err(Error::IncoherentDimensions { n, m });
    }
    check_dim("point", n, x.len())?;
    let fields = variation_fields(setup, delta)?;
    let l = &setup.lagrangian;
    let (g, gp) = (setup.field.g(x), setup.field.g_prime(x));
    let value = l.value(x, &g, &gp);
    let (lx, lr, la) = (l.d_x(x, &g, &gp), l.d_r(x, &g, &gp), l.d_alpha(x, &g, &gp));
    let gen = fields.generator_column(x);
    let (h1, h2) = gen.split_at(n);
    let jac = fields.generator_total_jacobian(x);
    let h3 = jac.rows(n, m);

    let t1: f64 = lx.iter().zip(h1).map(|(a, b)| a * b).sum();
    let t2: f64 = lr.iter().zip(h2).map(|(a, b)| a * b).sum();
    let t3: f64 = la.iter().zip(h3.iter()).map(|(a, b)| a * b).sum();
    let (trace, beta) = match variant {
        Theorem1Variant::PaperLiteral => (h3.trace(), log_derivative_along_vector(&setup.measure, h2, x)?),
        Theorem1Variant::TransportCorrected => (
            jac.rows(0, n).trace(),
            log_derivative_along_vector(&setup.measure, h1, x)?,
        ),
    };
    let terms = [t1, t2, t3, value * trace, value * beta];
    Ok(Theorem1Terms {
        terms,
        total: terms.iter().sum(),
    })
}

/// Density (relative to `ν`) of the exact `z`-derivative of the family measure,
/// from the chain rule in the transformed coordinates:
/// `L_r δg + L_α : δg' − L (β^ν(h1, x) + tr h1')` with `δg = h2 − g' h1`.
///
/// Second derivatives of `g` enter through `δg'`; they are taken by central
/// differences of the pulled-back Lagrangian along `h1`.
pub fn exact_derivative_density(setup: &NoetherSetup, delta: &[f64], x: &[f64]) -> Result<f64> {
    let (n, m) = setup.dims();
    check_dim("point", n, x.len())?;
    let fields = variation_fields(setup, delta)?;
    let l = &setup.lagrangian;
    let (g, gp) = (setup.field.g(x), setup.field.g_prime(x));
    let value = l.value(x, &g, &gp);
    let (lx, lr, la) = (l.d_x(x, &g, &gp), l.d_r(x, &g, &gp), l.d_alpha(x, &g, &gp));
    let gen = fields.generator_column(x);
    let (h1, h2) = gen.split_at(n);
    let jac = fields.generator_total_jacobian(x);
    let h1p = jac.rows(0, n).into_owned();
    let h3 = jac.rows(n, m).into_owned();

    // d/dz L(X_z, R_z, R_z' X_z'^{-1}) at z = 0
    let alpha_dot = &h3 - &gp * &h1p;
    let pulled: f64 = lx.iter().zip(h1).map(|(a, b)| a * b).sum::<f64>()
        + lr.iter().zip(h2).map(|(a, b)| a * b).sum::<f64>()
        + la.iter().zip(alpha_dot.iter()).map(|(a, b)| a * b).sum::<f64>();
    // directional derivative of x ↦ L(x, g(x), g'(x)) along h1
    let along = |s: f64| {
        let p: Vec<f64> = x.iter().zip(h1).map(|(a, b)| a + s * b).collect();
        l.value(&p, &setup.field.g(&p), &setup.field.g_prime(&p))
    };
    let transported = fd::derivative(along, 0.0, 1e-5);
    let beta = log_derivative_along_vector(&setup.measure, h1, x)?;
    Ok(pulled - transported - value * (beta + h1p.trace()))
}

/// `<F_{g,ν}(0), φ · density>` for any density on `E`.
fn pair_density<F>(setup: &NoetherSetup, phi: &TestFunction, engine: &PairingEngine, density: F) -> Result<Complex64>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let v = pair_fn(&setup.measure, engine, |x| phi.value(x) * density(x).unwrap_or(f64::NAN))?;
    Ok(v.value)
}

/// `∫ φ · total dν` for a five-term variant.
pub fn theorem1_pairing(
    setup: &NoetherSetup,
    delta: &[f64],
    phi: &TestFunction,
    engine: &PairingEngine,
    variant: Theorem1Variant,
) -> Result<Complex64> {
    let (n, m) = setup.dims();
    if variant == Theorem1Variant::PaperLiteral && n != m {
        return Err(Error::IncoherentDimensions { n, m });
    }
    pair_density(setup, phi, engine, |x| theorem1_evaluate(setup, delta, x, variant).map(|t| t.total))
}

pub fn exact_pairing(setup: &NoetherSetup, delta: &[f64], phi: &TestFunction, engine: &PairingEngine) -> Result<Complex64> {
    pair_density(setup, phi, engine, |x| exact_derivative_density(setup, delta, x))
}

/// Central difference in `z` (along `Δ`) of `<F_{g,ν}(zΔ), φ>` at `z = 0`.
pub fn family_weak_derivative_fd(
    setup: &NoetherSetup,
    delta: &[f64],
    phi: &TestFunction,
    engine: &PairingEngine,
    step: f64,
) -> Result<Complex64> {
    fd::validate_step(step)?;
    check_dim("Δ", setup.family.param_dim(), delta.len())?;
    let z_plus: Vec<f64> = delta.iter().map(|d| d * step).collect();
    let z_minus: Vec<f64> = delta.iter().map(|d| -d * step).collect();
    let plus = family_measure(setup, &z_plus)?.pair(phi, engine)?;
    let minus = family_measure(setup, &z_minus)?.pair(phi, engine)?;
    Ok((plus - minus) / (2.0 * step))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    PaperLiteral,
    TransportCorrected,
    Both,
    Neither,
}

/// Per-probe comparison of the FD oracle with each candidate density.
#[derive(Debug, Clone, Serialize)]
pub struct VariantProbe {
    pub probe: String,
    pub oracle: Complex64,
    pub paper_literal: Option<Complex64>,
    pub transport_corrected: Complex64,
    pub exact: Complex64,
}

/// One variant-ledger entry.
#[derive(Debug, Clone, Serialize)]
pub struct VariantOutcome {
    pub probes: Vec<VariantProbe>,
    /// `None` when the paper-literal variant is undefined (`m != n`).
    pub paper_literal_rel_err: Option<f64>,
    pub transport_corrected_rel_err: f64,
    pub exact_rel_err: f64,
    pub analytically_distinct: bool,
    pub tol: f64,
    pub winner: Winner,
}

/// Let the FD oracle decide which five-term variant reproduces the derivative.
///
/// A variant matches when its pairing agrees with the oracle within `tol`
/// (relative to `max(1, |oracle|)`) on every probe. `analytically_distinct`
/// records whether the two totals differ pointwise on `points`.
pub fn adjudicate_variants(
    setup: &NoetherSetup,
    delta: &[f64],
    probes: &[TestFunction],
    points: &[Vec<f64>],
    engine: &PairingEngine,
    step: f64,
    tol: f64,
) -> Result<VariantOutcome> {
    if probes.is_empty() {
        return Err(Error::Invalid("variant adjudication needs at least one probe".into()));
    }
    let (n, m) = setup.dims();
    let literal_defined = n == m;
    let rows = probes
        .par_iter()
        .map(|phi| {
            Ok(VariantProbe {
                probe: phi.label().to_string(),
                oracle: family_weak_derivative_fd(setup, delta, phi, engine, step)?,
                paper_literal: if literal_defined {
                    Some(theorem1_pairing(setup, delta, phi, engine, Theorem1Variant::PaperLiteral)?)
                } else {
                    None
                },
                transport_corrected: theorem1_pairing(setup, delta, phi, engine, Theorem1Variant::TransportCorrected)?,
                exact: exact_pairing(setup, delta, phi, engine)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = |pick: &dyn Fn(&VariantProbe) -> Complex64| {
        rows.iter()
            .map(|r| (pick(r) - r.oracle).norm() / r.oracle.norm().max(1.0))
            .fold(0.0, f64::max)
    };
    let paper_literal_rel_err = literal_defined.then(|| worst(&|r| r.paper_literal.unwrap_or_default()));
    let transport_corrected_rel_err = worst(&|r| r.transport_corrected);
    let exact_rel_err = worst(&|r| r.exact);

    let mut analytically_distinct = false;
    if literal_defined {
        for x in points {
            let a = theorem1_evaluate(setup, delta, x, Theorem1Variant::PaperLiteral)?.total;
            let b = theorem1_evaluate(setup, delta, x, Theorem1Variant::TransportCorrected)?.total;
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                analytically_distinct = true;
                break;
            }
        }
    }
    let literal_ok = paper_literal_rel_err.is_some_and(|e| e <= tol);
    let corrected_ok = transport_corrected_rel_err <= tol;
    let winner = match (literal_ok, corrected_ok) {
        (true, true) => Winner::Both,
        (true, false) => Winner::PaperLiteral,
        (false, true) => Winner::TransportCorrected,
        (false, false) => Winner::Neither,
    };
    Ok(VariantOutcome {
        probes: rows,
        paper_literal_rel_err,
        transport_corrected_rel_err,
        exact_rel_err,
        analytically_distinct,
        tol,
        winner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvarianceCertificate {
    pub max_abs_derivative: f64,
    pub threshold: f64,
    pub invariant: bool,
}

/// `max_φ |d/dz <F_{g,ν}(zΔ), φ>|` over the probe set, compared to `threshold`.
pub fn invariance_certificate(
    setup: &NoetherSetup,
    delta: &[f64],
    probes: &[TestFunction],
    engine: &PairingEngine,
    step: f64,
    threshold: f64,
) -> Result<InvarianceCertificate> {
    let max_abs_derivative = probes
        .par_iter()
        .map(|phi| family_weak_derivative_fd(setup, delta, phi, engine, step).map(|d| d.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(InvarianceCertificate {
        max_abs_derivative,
        threshold,
        invariant: max_abs_derivative <= threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoetherStatus {
    Invariant,
    NotInvariant,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoetherReport {
    pub status: NoetherStatus,
    pub certificate: InvarianceCertificate,
    pub variant: Theorem1Variant,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
    pub mean_abs_residual: f64,
    pub residual_tol: f64,
    /// Invariant and every residual within `residual_tol`.
    pub pass: bool,
}

/// Thresholds for [`noether_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoetherTolerances {
    pub certificate: f64,
    pub residual: f64,
    pub step: f64,
}

impl Default for NoetherTolerances {
    fn default() -> Self {
        Self {
            certificate: 1e-8,
            residual: 1e-6,
            step: 1e-4,
        }
    }
}

/// Certify invariance of the family measure, then evaluate the five-term sum
/// at every probe point.
#[allow(clippy::too_many_arguments)]
pub fn noether_residual(
    setup: &NoetherSetup,
    delta: &[f64],
    points: &[Vec<f64>],
    certificate_probes: &[TestFunction],
    engine: &PairingEngine,
    variant: Theorem1Variant,
    tol: NoetherTolerances,
) -> Result<NoetherReport> {
    let certificate = invariance_certificate(setup, delta, certificate_probes, engine, tol.step, tol.certificate)?;
    let residuals = points
        .par_iter()
        .map(|x| theorem1_evaluate(setup, delta, x, variant).map(|t| t.total))
        .collect::<Result<Vec<_>>>()?;
    let max_abs_residual = residuals.iter().map(|r| r.abs()).fold(0.0, f64::max);
    let mean_abs_residual = if residuals.is_empty() {
        0.0
    } else {
        residuals.iter().map(|r| r.abs()).sum::<f64>() / residuals.len() as f64
    };
    let status = if certificate.invariant {
        NoetherStatus::Invariant
    } else {
        NoetherStatus::NotInvariant
    };
    Ok(NoetherReport {
        status,
        certificate,
        variant,
        pass: certificate.invariant && max_abs_residual <= tol.residual,
        residuals,
        max_abs_residual,
        mean_abs_residual,
        residual_tol: tol.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Monomial;

    fn gh(order: usize) -> PairingEngine {
        PairingEngine::gauss_hermite(order)
    }

    fn identity_1d() -> FieldConfiguration {
        FieldConfiguration::affine(DMatrix::identity(1, 1), vec![0.0]).unwrap()
    }

    fn setup(l: LagrangianDensity, g: FieldConfiguration, f: TransformationFamily, nu: DensityMeasure) -> NoetherSetup {
        NoetherSetup::new(l, g, f, nu).unwrap()
    }

    fn probes_1d() -> Vec<TestFunction> {
        vec![
            TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![1])], vec![0.3], Some(1.0)).unwrap(),
            TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![0])], vec![-0.5], Some(0.7)).unwrap(),
        ]
    }

    #[test]
    fn library_families_validate() {
        let cfg = FdConfig::default();
        for f in [
            TransformationFamily::base_translation(2, 1),
            TransformationFamily::field_shift(2, 2),
            TransformationFamily::base_rotation(1),
            TransformationFamily::base_scaling(2, 1),
            TransformationFamily::identity(2, 2, 1),
            TransformationFamily::base_flow(1, VectorField::linear(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0])).unwrap()),
        ] {
            f.validate(cfg).unwrap();
        }
        for l in [
            LagrangianDensity::field_square(2, 1),
            LagrangianDensity::field_sum(2, 2),
            LagrangianDensity::radial_gaussian(2, 1),
            LagrangianDensity::free_field(2, 2),
        ] {
            l.validate(cfg).unwrap();
        }
        FieldConfiguration::square_1d().validate(cfg).unwrap();
    }

    #[test]
    fn bad_generator_is_rejected() {
        let base = TransformationFamily::base_translation(1, 1);
        let spec = FamilySpec {
            p: 1,
            n: 1,
            m: 1,
            map: base.map.clone(),
            generator: Arc::new(|_, _, _| DMatrix::from_column_slice(2, 1, &[2.0, 0.0])),
            state_jacobian: None,
            generator_jacobian: None,
            alpha_dependent: false,
            label: "wrong".into(),
        };
        assert!(matches!(
            TransformationFamily::new(spec, FdConfig::default()),
            Err(Error::DerivativeMismatch { .. })
        ));
    }

    #[test]
    fn variation_field_examples() {
        let nu = DensityMeasure::standard_gaussian(1);
        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), TransformationFamily::identity(1, 1, 1), nu.clone());
        let v = variation_fields(&s, &[1.0]).unwrap();
        assert_eq!(v.h1(&[0.4]), vec![0.0]);
        assert_eq!(v.h2(&[0.4]), vec![0.0]);
        assert_eq!(v.h3(&[0.4])[(0, 0)], 0.0);

        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), TransformationFamily::base_translation(1, 1), nu.clone());
        let v = variation_fields(&s, &[1.0]).unwrap();
        assert_eq!(v.h1(&[0.4]), vec![1.0]);
        assert_eq!(v.h2(&[0.4]), vec![0.0]);

        let src = TransformationFamily::field_source(
            1,
            1,
            Arc::new(|x: &[f64]| vec![x[0] * x[0]]),
            Arc::new(|x: &[f64]| DMatrix::from_element(1, 1, 2.0 * x[0])),
        );
        src.validate(FdConfig::default()).unwrap();
        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), src, nu);
        let v = variation_fields(&s, &[1.0]).unwrap();
        for x in [-1.0, 0.3, 2.0] {
            assert_eq!(v.h1(&[x]), vec![0.0]);
            assert!((v.h2(&[x])[0] - x * x).abs() < 1e-15);
            assert!((v.h3(&[x])[(0, 0)] - 2.0 * x).abs() < 1e-15);
            let fd_h3 = fd::derivative(|t| v.h2(&[t])[0], x, 1e-5);
            assert!(fd::rel_err(v.h3(&[x])[(0, 0)], fd_h3) < 1e-6);
        }
    }

    #[test]
    fn transformed_field_examples() {
        let nu = DensityMeasure::standard_gaussian(1);
        let probes = fd::probe_points(1, 8, 2.0);
        let s = setup(
            LagrangianDensity::unit(1, 1),
            FieldConfiguration::square_1d(),
            TransformationFamily::base_translation(1, 1),
            nu.clone(),
        );
        let gz = transformed_field(&s, &[0.1], &probes).unwrap();
        for y in [-1.5, -0.2, 0.0, 0.7, 2.0] {
            let (v, d) = gz.eval(&[y]).unwrap();
            assert!((v[0] - (y - 0.1) * (y - 0.1)).abs() < 1e-12);
            assert!((d[(0, 0)] - 2.0 * (y - 0.1)).abs() < 1e-10);
        }
        let g0 = transformed_field(&s, &[0.0], &probes).unwrap();
        assert_eq!(g0.eval(&[0.7]).unwrap().0, s.field.g(&[0.7]));

        let s = setup(
            LagrangianDensity::unit(1, 1),
            FieldConfiguration::square_1d(),
            TransformationFamily::field_shift(1, 1),
            nu,
        );
        let gz = transformed_field(&s, &[0.3], &probes).unwrap().into_configuration();
        for y in [-1.0, 0.5, 1.3] {
            assert!((gz.g(&[y])[0] - (y * y + 0.3)).abs() < 1e-14);
        }
    }

    #[test]
    fn graph_condition_is_enforced() {
        let s = setup(
            LagrangianDensity::unit(1, 1),
            identity_1d(),
            TransformationFamily::base_scaling(1, 1),
            DensityMeasure::standard_gaussian(1),
        );
        let probes = vec![vec![1.0]];
        assert!(transformed_field(&s, &[0.5], &probes).is_ok());
        let collapse = TransformationFamily::new(
            FamilySpec {
                p: 1,
                n: 1,
                m: 1,
                map: Arc::new(|z, x, r, _| (vec![x[0] * (1.0 - z[0])], r.to_vec())),
                generator: Arc::new(|x, _, _| DMatrix::from_column_slice(2, 1, &[-x[0], 0.0])),
                state_jacobian: None,
                generator_jacobian: None,
                alpha_dependent: false,
                label: "collapse".into(),
            },
            FdConfig::default(),
        )
        .unwrap();
        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), collapse, DensityMeasure::standard_gaussian(1));
        assert!(matches!(
            transformed_field(&s, &[1.5], &probes),
            Err(Error::GraphCondition { .. })
        ));
    }

    #[test]
    fn family_measure_examples() {
        let nu = DensityMeasure::standard_gaussian(1);
        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), TransformationFamily::base_translation(1, 1), nu.clone());
        let x = TestFunction::coordinate_power(1, 0, 1);
        let v = family_measure(&s, &[0.2]).unwrap().pair(&x, &gh(30)).unwrap();
        assert!((v.re - 0.2).abs() < 1e-13);
        let phi = &probes_1d()[0];
        let at0 = family_measure(&s, &[0.0]).unwrap().pair(phi, &gh(30)).unwrap();
        let direct = crate::pairing::pair(&nu, phi, &gh(30)).unwrap().value;
        assert_eq!(at0, direct);

        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), TransformationFamily::identity(1, 1, 1), nu);
        let a = family_measure(&s, &[0.7]).unwrap().pair(phi, &gh(30)).unwrap();
        assert_eq!(a, at0);
    }

    #[test]
    fn five_term_examples() {
        let nu = DensityMeasure::standard_gaussian(1);
        let s = setup(LagrangianDensity::field_square(1, 1), identity_1d(), TransformationFamily::base_translation(1, 1), nu.clone());
        let t = theorem1_evaluate(&s, &[1.0], &[1.0], Theorem1Variant::TransportCorrected).unwrap();
        assert_eq!(t.terms, [0.0, 0.0, 0.0, 0.0, -1.0]);
        assert_eq!(t.total, -1.0);

        let src = TransformationFamily::field_source(
            1,
            1,
            Arc::new(|x: &[f64]| vec![x[0]]),
            Arc::new(|_: &[f64]| DMatrix::identity(1, 1)),
        );
        let s = setup(LagrangianDensity::unit(1, 1), identity_1d(), src, nu.clone());
        let t = theorem1_evaluate(&s, &[1.0], &[0.5], Theorem1Variant::PaperLiteral).unwrap();
        assert_eq!(t.terms, [0.0, 0.0, 0.0, 1.0, -0.25]);
        assert_eq!(t.total, 0.75);

        let s = setup(LagrangianDensity::free_field(2, 1), FieldConfiguration::constant(2, vec![0.0]), TransformationFamily::identity(1, 2, 1), DensityMeasure::standard_gaussian(2));
        assert!(matches!(
            theorem1_evaluate(&s, &[1.0], &[0.0, 0.0], Theorem1Variant::PaperLiteral),
            Err(Error::IncoherentDimensions { n: 2, m: 1 })
        ));
        let t = theorem1_evaluate(&s, &[1.0], &[0.3, 0.1], Theorem1Variant::TransportCorrected).unwrap();
        assert_eq!(t.terms, [0.0; 5]);
    }

    #[test]
    fn field_shift_derivative_is_one() {
        let s = setup(
            LagrangianDensity::field_sum(1, 1),
            FieldConfiguration::constant(1, vec![0.0]),
            TransformationFamily::field_shift(1, 1),
            DensityMeasure::standard_gaussian(1),
        );
        let one = TestFunction::constant(1, 1.0);
        let d = family_weak_derivative_fd(&s, &[1.0], &one, &gh(20), 1e-4).unwrap();
        assert!((d.re - 1.0).abs() < 1e-10);
        for v in Theorem1Variant::ALL {
            let p = theorem1_pairing(&s, &[1.0], &one, &gh(20), v).unwrap();
            assert!((p.re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_family_annihilates_everything() {
        let s = setup(
            LagrangianDensity::radial_gaussian(2, 1),
            FieldConfiguration::affine(DMatrix::from_row_slice(1, 2, &[0.5, -1.0]), vec![0.2]).unwrap(),
            TransformationFamily::identity(1, 2, 1),
            DensityMeasure::standard_gaussian(2),
        );
        let phi = TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![1, 1])], vec![0.2, 0.0], Some(1.0)).unwrap();
        let d = family_weak_derivative_fd(&s, &[1.0], &phi, &gh(20), 1e-4).unwrap();
        assert!(d.norm() < 1e-10);
        for x in fd::probe_points(2, 10, 2.0) {
            let t = theorem1_evaluate(&s, &[1.0], &x, Theorem1Variant::TransportCorrected).unwrap();
            assert!(t.terms.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn total_is_linear_in_delta() {
        let s = setup(
            LagrangianDensity::free_field(2, 2),
            FieldConfiguration::affine(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]), vec![0.1, 0.0]).unwrap(),
            TransformationFamily::base_translation(2, 2),
            DensityMeasure::standard_gaussian(2),
        );
        let (d1, d2) = ([0.7, -0.2], [0.1, 1.3]);
        let sum = [0.8, 1.1];
        for x in fd::probe_points(2, 6, 1.5) {
            for v in Theorem1Variant::ALL {
                let a = theorem1_evaluate(&s, &d1, &x, v).unwrap().total;
                let b = theorem1_evaluate(&s, &d2, &x, v).unwrap().total;
                let c = theorem1_evaluate(&s, &sum, &x, v).unwrap().total;
                assert!((a + b - c).abs() < 1e-13 * (1.0 + c.abs()));
            }
        }
    }

    #[test]
    fn exact_density_matches_oracle_on_translation() {
        let s = setup(LagrangianDensity::field_square(1, 1), identity_1d(), TransformationFamily::base_translation(1, 1), DensityMeasure::standard_gaussian(1));
        let engine = gh(40);
        for phi in probes_1d() {
            let oracle = family_weak_derivative_fd(&s, &[1.0], &phi, &engine, 1e-4).unwrap();
            let exact = exact_pairing(&s, &[1.0], &phi, &engine).unwrap();
            assert!((oracle - exact).norm() < 1e-7, "{oracle} vs {exact}");
        }
    }

    #[test]
    fn rotation_is_certified_invariant() {
        let nu = DensityMeasure::standard_gaussian(2);
        let s = setup(
            LagrangianDensity::radial_gaussian(2, 1),
            FieldConfiguration::constant(2, vec![0.0]),
            TransformationFamily::base_rotation(1),
            nu,
        );
        let probes = vec![
            TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![1, 0])], vec![0.3, -0.2], Some(1.0)).unwrap(),
            TestFunction::plane_wave(vec![0.4, 0.9]),
        ];
        let points = fd::probe_points(2, 100, 2.0);
        let report = noether_residual(&s, &[1.0], &points, &probes, &gh(60), Theorem1Variant::TransportCorrected, NoetherTolerances::default()).unwrap();
        assert_eq!(report.status, NoetherStatus::Invariant, "{:?}", report.certificate);
        assert!(report.max_abs_residual <= 1e-8, "{}", report.max_abs_residual);
        assert!(report.pass);
    }

    #[test]
    fn translated_gaussian_is_not_invariant() {
        let s = setup(
            LagrangianDensity::unit(2, 2),
            FieldConfiguration::constant(2, vec![0.0, 0.0]),
            TransformationFamily::base_translation(2, 2),
            DensityMeasure::standard_gaussian(2),
        );
        let delta = [0.6, -0.4];
        let probes = vec![TestFunction::polynomial_times_gaussian(vec![Monomial::new(1.0, vec![1, 0])], vec![0.0, 0.0], Some(1.0)).unwrap()];
        let points = fd::probe_points(2, 20, 2.0);
        let report = noether_residual(&s, &delta, &points, &probes, &gh(20), Theorem1Variant::TransportCorrected, NoetherTolerances::default()).unwrap();
        assert_eq!(report.status, NoetherStatus::NotInvariant);
        assert!(!report.pass);
        for (x, r) in points.iter().zip(&report.residuals) {
            let expected = -(x[0] * delta[0] + x[1] * delta[1]);
            assert!((r - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn normalization_does_not_change_terms() {
        let nu = DensityMeasure::standard_gaussian(1);
        let a = setup(LagrangianDensity::field_square(1, 1), FieldConfiguration::square_1d(), TransformationFamily::base_translation(1, 1), nu.clone());
        let b = setup(LagrangianDensity::field_square(1, 1), FieldConfiguration::square_1d(), TransformationFamily::base_translation(1, 1), nu.scaled(17.0));
        for x in [-1.2, 0.0, 0.4] {
            for v in Theorem1Variant::ALL {
                assert_eq!(
                    theorem1_evaluate(&a, &[1.0], &[x], v).unwrap(),
                    theorem1_evaluate(&b, &[1.0], &[x], v).unwrap()
                );
            }
        }
    }
}

//! Numerical evaluation of `<nu, phi> = ∫ phi(x) exp(log_density(x)) dx`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measure::{DensityMeasure, MeasureKind, TestFunction};
use crate::quadrature::{Rule1d, TensorRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    GaussHermiteQuadrature,
    TensorGridQuadrature,
    MonteCarlo,
}

/// How a pairing is evaluated.
///
/// `order_or_samples` is the Gauss–Hermite order, the Gauss–Legendre order per
/// panel, or the Monte Carlo sample count, depending on `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingEngine {
    pub mode: PairingMode,
    pub order_or_samples: usize,
    pub seed: u64,
    pub workers: usize,
    pub bounds: Option<Vec<(f64, f64)>>,
    pub panels: usize,
    pub reported_tolerance: f64,
}

impl PairingEngine {
    pub fn gauss_hermite(order: usize) -> Self {
        Self {
            mode: PairingMode::GaussHermiteQuadrature,
            order_or_samples: order,
            seed: 0,
            workers: 1,
            bounds: None,
            panels: 1,
            reported_tolerance: 1e-10,
        }
    }

    /// Composite Gauss–Legendre on the box `bounds`.
    pub fn tensor_grid(bounds: Vec<(f64, f64)>, panels: usize, order: usize) -> Self {
        Self {
            mode: PairingMode::TensorGridQuadrature,
            order_or_samples: order,
            seed: 0,
            workers: 1,
            bounds: Some(bounds),
            panels,
            reported_tolerance: 1e-9,
        }
    }

    pub fn monte_carlo(samples: usize, seed: u64, workers: usize) -> Self {
        Self {
            mode: PairingMode::MonteCarlo,
            order_or_samples: samples,
            seed,
            workers: workers.max(1),
            bounds: None,
            panels: 1,
            reported_tolerance: 3.0 / (samples.max(1) as f64).sqrt(),
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.reported_tolerance = tol;
        self
    }
}

/// Result of a pairing; `std_error` is present for Monte Carlo only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingValue {
    pub value: Complex64,
    pub std_error: Option<f64>,
}

pub fn pair(nu: &DensityMeasure, phi: &TestFunction, engine: &PairingEngine) -> Result<PairingValue> {
    check_dim("test function", nu.dim(), phi.dim())?;
    pair_fn(nu, engine, |x| phi.value(x))
}

/// Pair `nu` with an arbitrary integrand.
pub fn pair_fn<F>(nu: &DensityMeasure, engine: &PairingEngine, integrand: F) -> Result<PairingValue>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    if nu.kind() == MeasureKind::Flat && engine.mode != PairingMode::TensorGridQuadrature {
        return Err(Error::UnboundedFlatPairing);
    }
    match engine.mode {
        PairingMode::GaussHermiteQuadrature => gauss_hermite(nu, engine.order_or_samples, integrand),
        PairingMode::TensorGridQuadrature => tensor_grid(nu, engine, integrand),
        PairingMode::MonteCarlo => monte_carlo(nu, engine, integrand),
    }
}

fn gauss_hermite<F>(nu: &DensityMeasure, order: usize, integrand: F) -> Result<PairingValue>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let reference = nu.reference();
    let dim = nu.dim();
    let rule = TensorRule::isotropic(Rule1d::standard_normal(order), dim);
    // ∫ phi rho dx = E_ref[phi rho / w_ref]; at the node x = m + L z,
    // -log w_ref(x) = |z|^2/2 + (n/2) log(2 pi) + log det L.
    let log_ref_norm = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() + reference.log_det_cholesky();
    let value = rule.integrate(|z| {
        let x = reference.transform(z);
        let z2: f64 = z.iter().map(|v| v * v).sum();
        let log_ratio = nu.log_density(&x) + 0.5 * z2 + log_ref_norm;
        let v = integrand(&x);
        if v == Complex64::new(0.0, 0.0) {
            v
        } else {
            v * log_ratio.exp()
        }
    })?;
    Ok(PairingValue {
        value,
        std_error: None,
    })
}

fn tensor_grid<F>(nu: &DensityMeasure, engine: &PairingEngine, integrand: F) -> Result<PairingValue>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let bounds = engine.bounds.as_ref().ok_or(Error::UnboundedFlatPairing)?;
    check_dim("quadrature box", nu.dim(), bounds.len())?;
    let axes = bounds
        .iter()
        .map(|&(a, b)| {
            if a < b && a.is_finite() && b.is_finite() {
                Ok(Rule1d::composite_legendre(a, b, engine.panels.max(1), engine.order_or_samples))
            } else {
                Err(Error::Invalid(format!("invalid box side [{a}, {b}]")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let value = TensorRule::new(axes).integrate(|x| {
        let v = integrand(x);
        if v == Complex64::new(0.0, 0.0) {
            v
        } else {
            v * nu.density(x)
        }
    })?;
    Ok(PairingValue {
        value,
        std_error: None,
    })
}

struct Partial {
    sum: Complex64,
    sum_sq: f64,
    count: usize,
}

fn monte_carlo<F>(nu: &DensityMeasure, engine: &PairingEngine, integrand: F) -> Result<PairingValue>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let sampler = nu.sampler().ok_or(Error::MissingSampler)?;
    let samples = engine.order_or_samples;
    if samples < 2 {
        return Err(Error::Invalid("monte carlo needs at least two samples".into()));
    }
    let workers = engine.workers.max(1);
    let base = samples / workers;
    let extra = samples % workers;
    // worker w owns its own ChaCha stream; the split depends only on (samples, workers)
    let partials: Vec<Result<Partial>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut rng = ChaCha20Rng::seed_from_u64(engine.seed);
            rng.set_stream(w as u64);
            let count = base + usize::from(w < extra);
            let mut sum = Complex64::new(0.0, 0.0);
            let mut sum_sq = 0.0;
            for _ in 0..count {
                let x = (sampler.draw)(&mut rng);
                let v = integrand(&x);
                if !(v.re.is_finite() && v.im.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "integrand",
                        point: x,
                    });
                }
                sum += v;
                sum_sq += v.norm_sqr();
            }
            Ok(Partial { sum, sum_sq, count })
        })
        .collect();
    let mut sum = Complex64::new(0.0, 0.0);
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for p in partials {
        let p = p?;
        sum += p.sum;
        sum_sq += p.sum_sq;
        count += p.count;
    }
    let n = count as f64;
    let mean = sum / n;
    let variance = ((sum_sq - n * mean.norm_sqr()) / (n - 1.0)).max(0.0);
    let mass = sampler.log_mass.exp();
    Ok(PairingValue {
        value: mean * mass,
        std_error: Some(mass * (variance / n).sqrt()),
    })
}

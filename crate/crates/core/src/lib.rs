//! Logarithmic derivatives of density measures and pseudomeasures on
//! finite-dimensional and lattice path spaces, with independent
//! finite-difference and quadrature oracles for every analytic formula.

pub mod error;
pub mod fd;
pub mod measure;
pub mod noether;
pub mod pairing;
pub mod pathspace;
pub mod quadrature;
pub mod scenario;
pub mod transport;

pub use error::{Error, Result};
pub use measure::{
    log_derivative_along_field, log_derivative_along_vector, DensityMeasure, MeasureKind, Monomial,
    TestFamily, TestFunction, VectorField,
};
pub use pairing::{pair, pair_fn, PairingEngine, PairingMode, PairingValue};

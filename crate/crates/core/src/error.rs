use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {context} expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("monte carlo pairing requires a sampler, but the measure has none")]
    MissingSampler,

    #[error("flat measure can only be paired on a grid quadrature over a bounded box")]
    UnboundedFlatPairing,

    #[error("non-finite {what} at probe point {point:?}")]
    NonFinite { what: &'static str, point: Vec<f64> },

    #[error("{what} disagrees with central finite differences at {point:?}: relative error {rel_err:.3e} > {tol:.1e}")]
    DerivativeMismatch {
        what: &'static str,
        point: Vec<f64>,
        rel_err: f64,
        tol: f64,
    },

    #[error("flow parameter {t} is outside the injectivity bound |t| < {t_max}")]
    FlowOutOfRange { t: f64, t_max: f64 },

    #[error("finite-difference step {0} must be positive and finite")]
    InvalidStep(f64),

    #[error("graph condition violated at {point:?}: transformed base map is not invertible (det = {det:.3e})")]
    GraphCondition { point: Vec<f64>, det: f64 },

    #[error("newton inversion did not converge at {point:?} after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence {
        point: Vec<f64>,
        iterations: usize,
        residual: f64,
    },

    #[error("paper-literal evaluation needs dim G = dim E, got n = {n}, m = {m}")]
    IncoherentDimensions { n: usize, m: usize },

    #[error("deterministic quadrature of a non-quadratic action is limited to M <= {max}, got M = {got}; use monte carlo")]
    PathDimensionTooLarge { got: usize, max: usize },

    #[error("regularization epsilon must be positive, got {0}")]
    InvalidRegularization(f64),

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl Error {
    /// The probe point a numerical fault was raised at, if any.
    pub fn probe_point(&self) -> Option<&[f64]> {
        match self {
            Error::NonFinite { point, .. }
            | Error::DerivativeMismatch { point, .. }
            | Error::GraphCondition { point, .. }
            | Error::NewtonDivergence { point, .. } => Some(point),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

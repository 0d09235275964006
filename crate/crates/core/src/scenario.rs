//! Declarative verification scenarios: the configuration schema, the catalog
//! of named builtins, aggregated validation, and execution into reports.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{self, FdConfig};
use crate::measure::{DensityMeasure, MeasureKind, Monomial, TestFunction, VectorField};
use crate::noether::{
    adjudicate_variants, exact_pairing, family_weak_derivative_fd, noether_residual, theorem1_evaluate,
    FieldConfiguration, LagrangianDensity, NoetherSetup, NoetherStatus, NoetherTolerances, Theorem1Variant,
    TransformationFamily, VariantOutcome, Winner,
};
use crate::pairing::{PairingEngine, PairingMode};
use crate::pathspace::{
    anomaly_refinement, anomaly_report, desk_generator, fresnel_closed_form, fresnel_contour_quadrature,
    BlockProductAction, CorollaryProbe, CorollaryStatus, DiscreteAction, FeynmanWeight, Hamiltonian, InitialData,
    KineticScheme, LatticePathSpace, PathAction,
};
use crate::transport::{analytic_weak_derivative, transport_weak_derivative, weak_derivative_convergence, weak_derivative_fd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LogderivCheck,
    Theorem1Check,
    NoetherCheck,
    AnomalyDemo,
}

/// Which index variant of the five-term formula to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSelection {
    Paper,
    Corrected,
    /// Evaluate both; a check passes when either variant does.
    #[default]
    Both,
}

impl VariantSelection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Self::Paper),
            "corrected" => Some(Self::Corrected),
            "both" => Some(Self::Both),
            _ => None,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// `N(mean, covariance)`; identity covariance when omitted.
    Gaussian {
        mean: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariance: Option<Vec<Vec<f64>>>,
    },
    /// Flat measure, paired on the given box.
    FlatBox { bounds: Vec<[f64; 2]> },
    /// Unnormalized `exp(-sum x_i^4 / 4 - |x|^2 / 2)`.
    QuarticWell { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    ConstantField { value: Vec<f64> },
    LinearField { matrix: Vec<Vec<f64>> },
    IdentityField { dim: usize },
    /// `(-x_2, x_1)` on the plane.
    RotationField,
    /// `k_i(x) = scale (x_{i+1}^2 - x_i / 2)`, indices cyclic.
    NonlinearField {
        dim: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Block-replicated `(Q, P) ↦ (Q^2, -Q P)` on a lattice with `d = 1`.
    DeskGenerator { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilyConfig {
    IdentityFamily { p: usize, n: usize, m: usize },
    TranslationFamily { n: usize, m: usize },
    RotationFamily { m: usize },
    ScalingFamily { n: usize, m: usize },
    FieldShiftFamily { n: usize, m: usize },
    /// `(x, r + z s(x))` with `s_i(x) = x_{i mod n}^power`.
    FieldSourceFamily {
        n: usize,
        m: usize,
        #[serde(default = "one_u32")]
        power: u32,
    },
    /// `(x + z k(x), r)`.
    FlowFamily {
        #[serde(default)]
        m: usize,
        field: FieldSpec,
    },
}

fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LagrangianSpec {
    Unit,
    FieldSquare,
    FieldSum,
    RadialGaussian,
    FreeField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConfigurationSpec {
    Constant { value: Vec<f64> },
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    Zero,
    FreeParticle {
        #[serde(default = "one")]
        mass: f64,
    },
    Harmonic {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "one")]
        omega: f64,
    },
    Anharmonic {
        #[serde(default = "one")]
        omega: f64,
        lambda: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ActionSpec {
    /// `sum_j Q_j P_j`; `S(x, y) = x y` for one step.
    XyDeskAction {
        #[serde(default = "one_usize")]
        steps: usize,
    },
    LatticeAction {
        #[serde(default = "one_usize")]
        d: usize,
        steps: usize,
        #[serde(default = "one")]
        t_total: f64,
        hamiltonian: HamiltonianSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<Vec<f64>>,
        #[serde(default)]
        scheme: KineticScheme,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunctionSpec {
    PolynomialTimesGaussian {
        terms: Vec<Monomial>,
        center: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<f64>,
    },
    CompactBump { center: Vec<f64>, radius: f64 },
    PlaneWave { frequency: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub mode: PairingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panels: Option<usize>,
}

fn default_probes() -> usize {
    16
}

fn default_step() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lagrangian: Option<LagrangianSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configuration: Option<ConfigurationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_functions: Vec<TestFunctionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    /// Relative tolerance of the main comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_tol: Option<f64>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_step")]
    pub fd_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_invariant: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Step counts `N` for an anomaly refinement sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Vec<usize>>,
}

impl ScenarioConfig {
    pub fn new(name: &str, kind: ScenarioKind, description: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            description: description.into(),
            measure: None,
            field: None,
            family: None,
            lagrangian: None,
            configuration: None,
            action: None,
            test_functions: Vec::new(),
            engine: None,
            delta: None,
            tolerance: None,
            certificate_tol: None,
            residual_tol: None,
            probes: default_probes(),
            fd_step: default_step(),
            variant: None,
            expect_invariant: None,
            epsilon: None,
            refinement: None,
        }
    }
}

/// Top level of a configuration file: a list of `[[scenario]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub scenario: Vec<ScenarioConfig>,
}

// ---------------------------------------------------------------------------
// catalog

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CatalogKind {
    Measure,
    Field,
    Family,
    Lagrangian,
    Configuration,
    Hamiltonian,
    Action,
    TestFunction,
    Scenario,
}

impl CatalogKind {
    pub const ALL: [CatalogKind; 9] = [
        CatalogKind::Measure,
        CatalogKind::Field,
        CatalogKind::Family,
        CatalogKind::Lagrangian,
        CatalogKind::Configuration,
        CatalogKind::Hamiltonian,
        CatalogKind::Action,
        CatalogKind::TestFunction,
        CatalogKind::Scenario,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CatalogKind::Measure => "measure",
            CatalogKind::Field => "field",
            CatalogKind::Family => "family",
            CatalogKind::Lagrangian => "lagrangian",
            CatalogKind::Configuration => "configuration",
            CatalogKind::Hamiltonian => "hamiltonian",
            CatalogKind::Action => "action",
            CatalogKind::TestFunction => "test-function",
            CatalogKind::Scenario => "scenario",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub kind: CatalogKind,
    pub parameters: &'static str,
    pub description: &'static str,
}

const fn entry(name: &'static str, kind: CatalogKind, parameters: &'static str, description: &'static str) -> CatalogEntry {
    CatalogEntry {
        name,
        kind,
        parameters,
        description,
    }
}

use CatalogKind as K;

static CATALOG: &[CatalogEntry] = &[
    entry("gaussian", K::Measure, "mean: [f64], covariance?: [[f64]]", "normalized Gaussian with exact sampler"),
    entry("flat-box", K::Measure, "bounds: [[lo, hi]]", "flat (translation-invariant) measure paired on a box"),
    entry("quartic-well", K::Measure, "dim: usize", "unnormalized exp(-sum x^4/4 - |x|^2/2)"),
    entry("constant-field", K::Field, "value: [f64]", "k(x) = h"),
    entry("linear-field", K::Field, "matrix: [[f64]]", "k(x) = A x"),
    entry("identity-field", K::Field, "dim: usize", "k(x) = x"),
    entry("rotation-field", K::Field, "", "k(x) = (-x2, x1)"),
    entry("nonlinear-field", K::Field, "dim: usize, scale?: f64", "k_i(x) = scale (x_{i+1}^2 - x_i/2)"),
    entry("desk-generator", K::Field, "steps: usize", "block-replicated (Q, P) -> (Q^2, -Q P) on a lattice path"),
    entry("identity-family", K::Family, "p, n, m: usize", "F(z, x, r, a) = (x, r)"),
    entry("translation-family", K::Family, "n, m: usize", "F(z, x, r, a) = (x + z, r)"),
    entry("rotation-family", K::Family, "m: usize", "F(z, x, r, a) = (R_z x, r) on the plane"),
    entry("scaling-family", K::Family, "n, m: usize", "F(z, x, r, a) = (e^z x, r)"),
    entry("field-shift-family", K::Family, "n, m: usize", "F(z, x, r, a) = (x, r + z)"),
    entry("field-source-family", K::Family, "n, m: usize, power?: u32", "F(z, x, r, a) = (x, r + z s(x)), s_i = x_(i mod n)^power"),
    entry("flow-family", K::Family, "m?: usize, field: <field>", "F(z, x, r, a) = (x + z k(x), r)"),
    entry("unit", K::Lagrangian, "", "L = 1"),
    entry("field-square", K::Lagrangian, "", "L = |r|^2"),
    entry("field-sum", K::Lagrangian, "", "L = sum r_i"),
    entry("radial-gaussian", K::Lagrangian, "", "L = exp(-|x|^2)"),
    entry("free-field", K::Lagrangian, "", "L = |a|^2/2 - |r|^2/2"),
    entry("constant", K::Configuration, "value: [f64]", "g(x) = c"),
    entry("affine", K::Configuration, "matrix: [[f64]], offset: [f64]", "g(x) = B x + c"),
    entry("square", K::Configuration, "", "g(x) = x^2 on R"),
    entry("zero", K::Hamiltonian, "", "h = 0"),
    entry("free-particle", K::Hamiltonian, "mass?: f64", "h = |p|^2 / 2m"),
    entry("harmonic", K::Hamiltonian, "mass?: f64, omega?: f64", "h = |p|^2/2m + m omega^2 |q|^2/2"),
    entry("anharmonic", K::Hamiltonian, "omega?: f64, lambda: f64", "h = |p|^2/2 + omega^2 |q|^2/2 + lambda sum q^4"),
    entry("xy-desk-action", K::Action, "steps?: usize", "S = sum_j Q_j P_j (S = x y for one step)"),
    entry("lattice-action", K::Action, "d?, steps, t_total?, hamiltonian, q?, scheme?", "discretized phase-space action"),
    entry("polynomial-times-gaussian", K::TestFunction, "terms, center, width?", "P(x) exp(-|x-c|^2 / 2w^2)"),
    entry("compact-bump", K::TestFunction, "center, radius", "smooth bump supported in a ball"),
    entry("plane-wave", K::TestFunction, "frequency", "exp(i <w, x>)"),
    entry("gaussian-eq1", K::Scenario, "", "log-derivative formula on a correlated 2-D Gaussian, linear field (exit 0)"),
    entry("gaussian-nonlinear-eq1", K::Scenario, "", "log-derivative formula on a 3-D Gaussian, nonlinear field (exit 0)"),
    entry("flat-box-eq1", K::Scenario, "", "log-derivative formula on a flat box, k = diag(1, 2) x (exit 0)"),
    entry("quartic-eq1", K::Scenario, "", "log-derivative formula on an unnormalized quartic well (exit 0)"),
    entry("theorem1-field-shift", K::Scenario, "", "five-term formula, field shift of r^2 Lagrangian (exit 0)"),
    entry("theorem1-field-source", K::Scenario, "", "five-term formula, r + z x on R (exit 0)"),
    entry("theorem1-translation", K::Scenario, "", "five-term formula under base translation; no variant matches (exit 1)"),
    entry("noether-rotation", K::Scenario, "", "rotation-invariant Gaussian setup, residual vanishes (exit 0)"),
    entry("noether-broken-translation", K::Scenario, "", "translated Gaussian, flagged not invariant (exit 0)"),
    entry("anomaly-desk-xy", K::Scenario, "", "desk model S = x y, anomaly field and refinement (exit 0)"),
    entry("anomaly-scaling", K::Scenario, "", "scaling of a harmonic lattice: anomaly = M, corollary inapplicable (exit 0)"),
];

pub fn catalog(kind: Option<CatalogKind>) -> Vec<CatalogEntry> {
    CATALOG.iter().filter(|e| kind.is_none_or(|k| e.kind == k)).cloned().collect()
}

pub fn builtin_scenarios() -> Vec<ScenarioConfig> {
    use ScenarioKind::*;
    let poly = |terms: Vec<(f64, Vec<u32>)>, center: Vec<f64>, width: f64| TestFunctionSpec::PolynomialTimesGaussian {
        terms: terms.into_iter().map(|(c, p)| Monomial::new(c, p)).collect(),
        center,
        width: Some(width),
    };
    let gh = |order: usize| EngineSpec {
        mode: PairingMode::GaussHermiteQuadrature,
        order: Some(order),
        samples: None,
        seed: None,
        workers: None,
        bounds: None,
        panels: None,
    };

    let mut out = Vec::new();

    let mut s = ScenarioConfig::new("gaussian-eq1", LogderivCheck, "log-derivative formula on a correlated Gaussian");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.2, -0.1],
        covariance: Some(vec![vec![1.0, 0.3], vec![0.3, 0.8]]),
    });
    s.field = Some(FieldSpec::LinearField {
        matrix: vec![vec![0.5, -0.2], vec![0.1, 1.0]],
    });
    s.test_functions = vec![
        poly(vec![(1.0, vec![1, 0]), (0.5, vec![0, 2])], vec![0.3, 0.0], 1.2),
        TestFunctionSpec::PlaneWave {
            frequency: vec![0.7, -0.4],
        },
    ];
    s.engine = Some(gh(40));
    out.push(s);

    let mut s = ScenarioConfig::new("gaussian-nonlinear-eq1", LogderivCheck, "nonlinear field on a 3-D Gaussian");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.0; 3],
        covariance: None,
    });
    s.field = Some(FieldSpec::NonlinearField { dim: 3, scale: 0.5 });
    s.test_functions = vec![
        poly(vec![(1.0, vec![1, 1, 0])], vec![0.1, 0.2, -0.3], 1.0),
        TestFunctionSpec::PlaneWave {
            frequency: vec![0.3, 0.5, -0.2],
        },
    ];
    s.engine = Some(gh(24));
    out.push(s);

    let mut s = ScenarioConfig::new("flat-box-eq1", LogderivCheck, "flat measure on a box, linear field");
    s.measure = Some(MeasureSpec::FlatBox {
        bounds: vec![[-6.0, 6.0], [-6.0, 6.0]],
    });
    s.field = Some(FieldSpec::LinearField {
        matrix: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
    });
    s.test_functions = vec![
        TestFunctionSpec::CompactBump {
            center: vec![0.5, -0.3],
            radius: 2.0,
        },
        poly(vec![(1.0, vec![2, 0])], vec![0.0, 0.0], 1.0),
    ];
    out.push(s);

    let mut s = ScenarioConfig::new("quartic-eq1", LogderivCheck, "unnormalized quartic well, rotation field");
    s.measure = Some(MeasureSpec::QuarticWell { dim: 2 });
    s.field = Some(FieldSpec::RotationField);
    s.test_functions = vec![poly(vec![(1.0, vec![1, 0])], vec![0.4, 0.4], 1.0)];
    s.engine = Some(gh(80));
    out.push(s);

    let mut s = ScenarioConfig::new("theorem1-field-shift", Theorem1Check, "field shift of an r^2 Lagrangian");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.0],
        covariance: None,
    });
    s.lagrangian = Some(LagrangianSpec::FieldSquare);
    s.configuration = Some(ConfigurationSpec::Affine {
        matrix: vec![vec![1.0]],
        offset: vec![0.2],
    });
    s.family = Some(FamilyConfig::FieldShiftFamily { n: 1, m: 1 });
    s.engine = Some(gh(40));
    out.push(s);

    let mut s = ScenarioConfig::new("theorem1-field-source", Theorem1Check, "r + z x on the line, unit Lagrangian");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.0],
        covariance: None,
    });
    s.lagrangian = Some(LagrangianSpec::Unit);
    s.configuration = Some(ConfigurationSpec::Affine {
        matrix: vec![vec![1.0]],
        offset: vec![0.0],
    });
    s.family = Some(FamilyConfig::FieldSourceFamily { n: 1, m: 1, power: 1 });
    s.engine = Some(gh(40));
    out.push(s);

    let mut s = ScenarioConfig::new("theorem1-translation", Theorem1Check, "base translation of an r^2 Lagrangian");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.0],
        covariance: None,
    });
    s.lagrangian = Some(LagrangianSpec::FieldSquare);
    s.configuration = Some(ConfigurationSpec::Affine {
        matrix: vec![vec![1.0]],
        offset: vec![0.0],
    });
    s.family = Some(FamilyConfig::TranslationFamily { n: 1, m: 1 });
    s.engine = Some(gh(40));
    out.push(s);

    let mut s = ScenarioConfig::new("noether-rotation", NoetherCheck, "rotation-invariant Gaussian setup");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.0, 0.0],
        covariance: None,
    });
    s.lagrangian = Some(LagrangianSpec::RadialGaussian);
    s.configuration = Some(ConfigurationSpec::Constant { value: vec![0.0] });
    s.family = Some(FamilyConfig::RotationFamily { m: 1 });
    s.test_functions = vec![
        poly(vec![(1.0, vec![1, 0])], vec![0.3, -0.2], 1.0),
        TestFunctionSpec::PlaneWave {
            frequency: vec![0.4, 0.9],
        },
    ];
    s.engine = Some(gh(60));
    s.probes = 100;
    s.variant = Some(VariantSelection::Corrected);
    out.push(s);

    let mut s = ScenarioConfig::new("noether-broken-translation", NoetherCheck, "translated Gaussian, unit Lagrangian");
    s.measure = Some(MeasureSpec::Gaussian {
        mean: vec![0.0, 0.0],
        covariance: None,
    });
    s.lagrangian = Some(LagrangianSpec::Unit);
    s.configuration = Some(ConfigurationSpec::Constant { value: vec![0.0, 0.0] });
    s.family = Some(FamilyConfig::TranslationFamily { n: 2, m: 2 });
    s.delta = Some(vec![0.6, -0.4]);
    s.test_functions = vec![poly(vec![(1.0, vec![1, 0])], vec![0.0, 0.0], 1.0)];
    s.engine = Some(gh(30));
    s.probes = 100;
    s.expect_invariant = Some(false);
    s.variant = Some(VariantSelection::Corrected);
    out.push(s);

    let mut s = ScenarioConfig::new("anomaly-desk-xy", AnomalyDemo, "desk model S = x y with generator (x^2, -x y)");
    s.action = Some(ActionSpec::XyDeskAction { steps: 1 });
    s.family = Some(FamilyConfig::FlowFamily {
        m: 0,
        field: FieldSpec::DeskGenerator { steps: 1 },
    });
    s.test_functions = vec![poly(vec![(1.0, vec![0, 0])], vec![0.3, -0.2], 1.0)];
    s.engine = Some(gh(60));
    s.epsilon = Some(1.0);
    s.probes = 64;
    s.refinement = Some(vec![4, 8, 16]);
    out.push(s);

    let mut s = ScenarioConfig::new("anomaly-scaling", AnomalyDemo, "uniform scaling of a harmonic lattice");
    s.action = Some(ActionSpec::LatticeAction {
        d: 1,
        steps: 4,
        t_total: 1.0,
        hamiltonian: HamiltonianSpec::Harmonic { mass: 1.0, omega: 1.0 },
        q: None,
        scheme: KineticScheme::Forward,
    });
    s.family = Some(FamilyConfig::ScalingFamily { n: 8, m: 0 });
    s.expect_invariant = Some(false);
    s.epsilon = Some(0.5);
    s.probes = 16;
    out.push(s);

    out
}

pub fn builtin_scenario(name: &str) -> Option<ScenarioConfig> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

// ---------------------------------------------------------------------------
// construction

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Invalid(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn build_measure(spec: &MeasureSpec) -> Result<DensityMeasure> {
    match spec {
        MeasureSpec::Gaussian { mean, covariance } => {
            if mean.is_empty() {
                return Err(Error::Invalid("gaussian mean must be non-empty".into()));
            }
            let cov = match covariance {
                Some(c) => matrix(c, "covariance")?,
                None => DMatrix::identity(mean.len(), mean.len()),
            };
            if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
                return Err(Error::Invalid(format!(
                    "covariance is {}x{} but the mean has {} entries",
                    cov.nrows(),
                    cov.ncols(),
                    mean.len()
                )));
            }
            Ok(DensityMeasure::gaussian(mean, &cov)?.with_label("gaussian"))
        }
        MeasureSpec::FlatBox { bounds } => {
            if bounds.is_empty() || bounds.iter().any(|b| !(b[0] < b[1])) {
                return Err(Error::Invalid("flat-box bounds must be non-empty intervals [lo, hi] with lo < hi".into()));
            }
            Ok(DensityMeasure::flat(bounds.len()).with_label("flat-box"))
        }
        MeasureSpec::QuarticWell { dim } => {
            let ld: crate::measure::ScalarFn =
                Arc::new(|x: &[f64]| -x.iter().map(|v| 0.25 * v.powi(4) + 0.5 * v * v).sum::<f64>());
            let grad: crate::measure::VectorFn = Arc::new(|x: &[f64]| x.iter().map(|v| -v.powi(3) - v).collect());
            Ok(DensityMeasure::from_log_density(*dim, MeasureKind::Unnormalized, ld, grad, FdConfig::default())?
                .with_label("quartic-well"))
        }
    }
}

pub fn build_field(spec: &FieldSpec) -> Result<VectorField> {
    match spec {
        FieldSpec::ConstantField { value } => {
            if value.is_empty() {
                return Err(Error::Invalid("constant field value must be non-empty".into()));
            }
            Ok(VectorField::constant(value.clone()))
        }
        FieldSpec::LinearField { matrix: m } => VectorField::linear(matrix(m, "linear field matrix")?),
        FieldSpec::IdentityField { dim } => Ok(VectorField::identity(*dim)),
        FieldSpec::RotationField => VectorField::linear(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]))
            .map(|f| f.with_label("rotation")),
        FieldSpec::NonlinearField { dim, scale } => {
            let (n, s) = (*dim, *scale);
            if n == 0 {
                return Err(Error::Invalid("nonlinear field needs dim >= 1".into()));
            }
            VectorField::new(
                n,
                Arc::new(move |x: &[f64]| (0..n).map(|i| s * (x[(i + 1) % n].powi(2) - 0.5 * x[i])).collect()),
                Arc::new(move |x: &[f64]| {
                    let mut j = DMatrix::zeros(n, n);
                    for i in 0..n {
                        j[(i, (i + 1) % n)] += 2.0 * s * x[(i + 1) % n];
                        j[(i, i)] -= 0.5 * s;
                    }
                    j
                }),
                FdConfig::default(),
            )
            .map(|f| f.with_label("nonlinear"))
        }
        FieldSpec::DeskGenerator { steps } => Ok(desk_generator(&LatticePathSpace::new(1, *steps, 1.0)?)),
    }
}

pub fn build_family(spec: &FamilyConfig) -> Result<TransformationFamily> {
    let f = match spec {
        FamilyConfig::IdentityFamily { p, n, m } => TransformationFamily::identity(*p, *n, *m),
        FamilyConfig::TranslationFamily { n, m } => TransformationFamily::base_translation(*n, *m),
        FamilyConfig::RotationFamily { m } => TransformationFamily::base_rotation(*m),
        FamilyConfig::ScalingFamily { n, m } => TransformationFamily::base_scaling(*n, *m),
        FamilyConfig::FieldShiftFamily { n, m } => TransformationFamily::field_shift(*n, *m),
        FamilyConfig::FieldSourceFamily { n, m, power } => {
            let (n, m, k) = (*n, *m, *power);
            if n == 0 {
                return Err(Error::Invalid("field-source family needs n >= 1".into()));
            }
            TransformationFamily::field_source(
                n,
                m,
                Arc::new(move |x: &[f64]| (0..m).map(|i| x[i % n].powi(k as i32)).collect()),
                Arc::new(move |x: &[f64]| {
                    let mut j = DMatrix::zeros(m, n);
                    for i in 0..m {
                        if k > 0 {
                            j[(i, i % n)] = k as f64 * x[i % n].powi(k as i32 - 1);
                        }
                    }
                    j
                }),
            )
        }
        FamilyConfig::FlowFamily { m, field } => TransformationFamily::base_flow(*m, build_field(field)?),
    };
    let (n, _) = f.dims();
    if n == 0 {
        return Err(Error::Invalid("family base dimension must be positive".into()));
    }
    Ok(f)
}

pub fn build_lagrangian(spec: LagrangianSpec, n: usize, m: usize) -> LagrangianDensity {
    match spec {
        LagrangianSpec::Unit => LagrangianDensity::unit(n, m),
        LagrangianSpec::FieldSquare => LagrangianDensity::field_square(n, m),
        LagrangianSpec::FieldSum => LagrangianDensity::field_sum(n, m),
        LagrangianSpec::RadialGaussian => LagrangianDensity::radial_gaussian(n, m),
        LagrangianSpec::FreeField => LagrangianDensity::free_field(n, m),
    }
}

pub fn build_configuration(spec: &ConfigurationSpec, n: usize) -> Result<FieldConfiguration> {
    match spec {
        ConfigurationSpec::Constant { value } => Ok(FieldConfiguration::constant(n, value.clone())),
        ConfigurationSpec::Affine { matrix: m, offset } => FieldConfiguration::affine(matrix(m, "affine matrix")?, offset.clone()),
        ConfigurationSpec::Square => Ok(FieldConfiguration::square_1d()),
    }
}

pub fn build_hamiltonian(spec: HamiltonianSpec, d: usize) -> Result<Hamiltonian> {
    match spec {
        HamiltonianSpec::Zero => Ok(Hamiltonian::zero(d)),
        HamiltonianSpec::FreeParticle { mass } => Hamiltonian::free_particle(d, mass),
        HamiltonianSpec::Harmonic { mass, omega } => Hamiltonian::harmonic(d, mass, omega),
        HamiltonianSpec::Anharmonic { omega, lambda } => Ok(Hamiltonian::anharmonic(d, omega, lambda)),
    }
}

/// The action together with its lattice and the endpoint data for `f`.
pub fn build_action(spec: &ActionSpec) -> Result<(LatticePathSpace, Arc<dyn PathAction>, Vec<usize>, Vec<f64>)> {
    match spec {
        ActionSpec::XyDeskAction { steps } => {
            let space = LatticePathSpace::new(1, *steps, 1.0)?;
            Ok((space, Arc::new(BlockProductAction::new(space)), space.endpoint_indices(), vec![0.0]))
        }
        ActionSpec::LatticeAction {
            d,
            steps,
            t_total,
            hamiltonian,
            q,
            scheme,
        } => {
            let space = LatticePathSpace::new(*d, *steps, *t_total)?;
            let q = q.clone().unwrap_or_else(|| vec![0.0; *d]);
            let act = DiscreteAction::new(space, build_hamiltonian(*hamiltonian, *d)?, q.clone(), *scheme)?;
            Ok((space, Arc::new(act), space.endpoint_indices(), q))
        }
    }
}

pub fn build_test_function(spec: &TestFunctionSpec) -> Result<TestFunction> {
    match spec {
        TestFunctionSpec::PolynomialTimesGaussian { terms, center, width } => {
            if center.is_empty() {
                return Err(Error::Invalid("test function center must be non-empty".into()));
            }
            TestFunction::polynomial_times_gaussian(terms.clone(), center.clone(), *width)
        }
        TestFunctionSpec::CompactBump { center, radius } => TestFunction::compact_bump(center.clone(), *radius),
        TestFunctionSpec::PlaneWave { frequency } => {
            if frequency.is_empty() {
                return Err(Error::Invalid("plane-wave frequency must be non-empty".into()));
            }
            Ok(TestFunction::plane_wave(frequency.clone()))
        }
    }
}

/// Default probes when a scenario lists none.
fn default_test_functions(dim: usize, grid: bool) -> Vec<TestFunction> {
    let mut powers = vec![0; dim];
    powers[0] = 1;
    let center: Vec<f64> = (0..dim).map(|i| 0.3 - 0.2 * i as f64).collect();
    let mut out = vec![
        TestFunction::polynomial_times_gaussian(
            vec![Monomial::new(1.0, powers), Monomial::new(0.5, vec![0; dim])],
            center.clone(),
            Some(1.0),
        )
        .expect("default probe is well formed"),
        TestFunction::plane_wave((0..dim).map(|i| 0.7 - 0.5 * i as f64).collect()),
    ];
    if grid {
        out.push(TestFunction::compact_bump(center, 1.5).expect("default bump is well formed"));
    }
    out
}

pub fn build_engine(spec: Option<&EngineSpec>, measure: Option<&MeasureSpec>, seed: Option<u64>) -> Result<PairingEngine> {
    let flat_bounds = match measure {
        Some(MeasureSpec::FlatBox { bounds }) => Some(bounds.iter().map(|b| (b[0], b[1])).collect::<Vec<_>>()),
        _ => None,
    };
    let mut engine = match spec {
        None => match flat_bounds {
            Some(b) => PairingEngine::tensor_grid(b, 48, 10),
            None => PairingEngine::gauss_hermite(40),
        },
        Some(s) => match s.mode {
            PairingMode::GaussHermiteQuadrature => PairingEngine::gauss_hermite(s.order.unwrap_or(40)),
            PairingMode::TensorGridQuadrature => {
                let bounds = s
                    .bounds
                    .as_ref()
                    .map(|b| b.iter().map(|v| (v[0], v[1])).collect())
                    .or(flat_bounds)
                    .ok_or_else(|| Error::Invalid("tensor-grid engine needs bounds".into()))?;
                PairingEngine::tensor_grid(bounds, s.panels.unwrap_or(48), s.order.unwrap_or(10))
            }
            PairingMode::MonteCarlo => PairingEngine::monte_carlo(
                s.samples.unwrap_or(100_000),
                s.seed.unwrap_or(0),
                s.workers.unwrap_or(1),
            ),
        },
    };
    if engine.order_or_samples == 0 {
        return Err(Error::Invalid("engine order / sample count must be positive".into()));
    }
    if let Some(seed) = seed {
        engine.seed = seed;
    }
    Ok(engine)
}

enum Built {
    Logderiv {
        nu: DensityMeasure,
        field: VectorField,
        phis: Vec<TestFunction>,
    },
    Family {
        setup: NoetherSetup,
        delta: Vec<f64>,
        phis: Vec<TestFunction>,
    },
    Anomaly {
        space: LatticePathSpace,
        weight: FeynmanWeight,
        family: TransformationFamily,
        delta: Vec<f64>,
        phis: Vec<TestFunction>,
    },
}

struct Prepared {
    built: Built,
    engine: PairingEngine,
    variant: VariantSelection,
}

/// Collects every problem instead of stopping at the first.
#[derive(Default)]
struct Problems(Vec<String>);

impl Problems {
    fn take<T>(&mut self, what: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.0.push(format!("{what}: {e}"));
                None
            }
        }
    }

    fn require<'a, T>(&mut self, what: &str, v: &'a Option<T>, kind: ScenarioKind) -> Option<&'a T> {
        if v.is_none() {
            self.0.push(format!("`{what}` is required for kind {kind:?}"));
        }
        v.as_ref()
    }

    fn dim(&mut self, what: &str, expected: usize, got: usize) {
        if expected != got {
            self.0.push(format!("{what}: dimension {got} does not match {expected}"));
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.0.push(msg());
        }
    }
}

fn prepare(cfg: &ScenarioConfig, opts: &RunOptions) -> std::result::Result<Prepared, Vec<String>> {
    let mut p = Problems::default();
    let kind = cfg.kind;
    p.check(cfg.fd_step > 0.0 && cfg.fd_step.is_finite(), || format!("fd_step must be positive, got {}", cfg.fd_step));
    p.check(cfg.probes > 0, || "probes must be positive".into());
    for (what, v) in [
        ("tolerance", cfg.tolerance),
        ("certificate_tol", cfg.certificate_tol),
        ("residual_tol", cfg.residual_tol),
    ] {
        if let Some(v) = v {
            p.check(v >= 0.0 && v.is_finite(), || format!("{what} must be non-negative, got {v}"));
        }
    }
    let variant = opts.variant.or(cfg.variant).unwrap_or_default();
    let engine = p.take("engine", build_engine(cfg.engine.as_ref(), cfg.measure.as_ref(), opts.seed));
    let phis: Vec<TestFunction> = cfg
        .test_functions
        .iter()
        .enumerate()
        .filter_map(|(i, t)| p.take(&format!("test_functions[{i}]"), build_test_function(t)))
        .collect();

    let built = match kind {
        ScenarioKind::LogderivCheck => {
            let nu = p.require("measure", &cfg.measure, kind).and_then(|m| p.take("measure", build_measure(m)));
            let field = p.require("field", &cfg.field, kind).and_then(|f| p.take("field", build_field(f)));
            match (nu, field) {
                (Some(nu), Some(field)) => {
                    let n = nu.dim();
                    p.dim("field", n, field.dim());
                    if let Some(e) = &engine {
                        if nu.kind() == MeasureKind::Flat && e.mode != PairingMode::TensorGridQuadrature {
                            p.0.push("flat measures must be paired with a tensor-grid engine over a box".into());
                        }
                        if let Some(b) = &e.bounds {
                            p.dim("engine bounds", n, b.len());
                        }
                    }
                    let phis = with_defaults(phis, n, engine.as_ref(), &mut p);
                    Some(Built::Logderiv { nu, field, phis })
                }
                _ => None,
            }
        }
        ScenarioKind::Theorem1Check | ScenarioKind::NoetherCheck => {
            let nu = p.require("measure", &cfg.measure, kind).and_then(|m| p.take("measure", build_measure(m)));
            let family = p.require("family", &cfg.family, kind).and_then(|f| p.take("family", build_family(f)));
            let lag = *p.require("lagrangian", &cfg.lagrangian, kind).unwrap_or(&LagrangianSpec::Unit);
            let conf_spec = p.require("configuration", &cfg.configuration, kind);
            match (nu, family, conf_spec) {
                (Some(nu), Some(family), Some(conf_spec)) => {
                    let n = nu.dim();
                    let (fn_, fm) = family.dims();
                    p.dim("family base", n, fn_);
                    let conf = p.take("configuration", build_configuration(conf_spec, n));
                    if let Some(c) = &conf {
                        p.dim("configuration input", n, c.dims().0);
                        p.dim("configuration output", fm, c.dims().1);
                    }
                    let delta = cfg.delta.clone().unwrap_or_else(|| vec![1.0; family.param_dim()]);
                    p.dim("delta", family.param_dim(), delta.len());
                    if variant == VariantSelection::Paper && n != fm {
                        p.0.push(format!("variant `paper` needs dim G = dim E, got n = {n}, m = {fm}"));
                    }
                    if nu.kind() == MeasureKind::Flat {
                        p.0.push("family checks need a measure with Gauss-Hermite or Monte Carlo pairing, not a flat box".into());
                    }
                    let phis = with_defaults(phis, n, engine.as_ref(), &mut p);
                    match conf {
                        Some(conf) if p.0.is_empty() => p
                            .take("setup", NoetherSetup::new(build_lagrangian(lag, n, fm), conf, family, nu))
                            .map(|setup| Built::Family { setup, delta, phis }),
                        _ => None,
                    }
                }
                _ => None,
            }
        }
        ScenarioKind::AnomalyDemo => {
            let action = p.require("action", &cfg.action, kind).and_then(|a| p.take("action", build_action(a)));
            let family = p.require("family", &cfg.family, kind).and_then(|f| p.take("family", build_family(f)));
            let eps = cfg.epsilon.unwrap_or(1.0);
            match (action, family) {
                (Some((space, act, endpoint, offset)), Some(family)) => {
                    p.dim("family base", space.dim(), family.dims().0);
                    p.dim("family field space", 0, family.dims().1);
                    let delta = cfg.delta.clone().unwrap_or_else(|| vec![1.0; family.param_dim()]);
                    p.dim("delta", family.param_dim(), delta.len());
                    for (i, phi) in phis.iter().enumerate() {
                        p.dim(&format!("test_functions[{i}]"), space.dim(), phi.dim());
                    }
                    if let Some(r) = &cfg.refinement {
                        p.check(!r.is_empty() && r.iter().all(|&n| n > 0), || "refinement step counts must be positive".into());
                        p.check(
                            matches!(cfg.action, Some(ActionSpec::XyDeskAction { .. })) || matches!(cfg.family, Some(FamilyConfig::ScalingFamily { .. })),
                            || "refinement sweeps need the xy-desk-action or a scaling-family".into(),
                        );
                    }
                    let weight = p.take("epsilon", FeynmanWeight::from_action(act, InitialData::Unit, eps, endpoint, offset));
                    weight.map(|weight| Built::Anomaly {
                        space,
                        weight,
                        family,
                        delta,
                        phis,
                    })
                }
                _ => None,
            }
        }
    };
    match (built, engine) {
        (Some(built), Some(engine)) if p.0.is_empty() => Ok(Prepared { built, engine, variant }),
        _ => {
            if p.0.is_empty() {
                p.0.push("scenario could not be assembled".into());
            }
            Err(p.0)
        }
    }
}

fn with_defaults(phis: Vec<TestFunction>, n: usize, engine: Option<&PairingEngine>, p: &mut Problems) -> Vec<TestFunction> {
    for (i, phi) in phis.iter().enumerate() {
        p.dim(&format!("test_functions[{i}]"), n, phi.dim());
    }
    if phis.is_empty() {
        let grid = engine.is_some_and(|e| e.mode == PairingMode::TensorGridQuadrature);
        default_test_functions(n, grid)
    } else {
        phis
    }
}

/// Validate one scenario; every problem is reported.
pub fn validate(cfg: &ScenarioConfig) -> std::result::Result<(), Vec<String>> {
    prepare(cfg, &RunOptions::default()).map(|_| ())
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub check: String,
    pub analytic: f64,
    pub oracle: f64,
    pub abs_err: f64,
    /// `abs_err / max(1, |analytic|)`.
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(check: impl Into<String>, analytic: f64, oracle: f64, tol: f64) -> Self {
        let abs_err = (analytic - oracle).abs();
        let rel_err = abs_err / analytic.abs().max(1.0);
        Self {
            check: check.into(),
            analytic,
            oracle,
            abs_err,
            rel_err,
            tol,
            pass: rel_err <= tol,
        }
    }

    /// One row for real values, `.re` and `.im` rows otherwise.
    pub fn complex(check: &str, analytic: Complex64, oracle: Complex64, tol: f64) -> Vec<Self> {
        if analytic.im == 0.0 && oracle.im == 0.0 {
            vec![Self::new(check, analytic.re, oracle.re, tol)]
        } else {
            vec![
                Self::new(format!("{check}.re"), analytic.re, oracle.re, tol),
                Self::new(format!("{check}.im"), analytic.im, oracle.im, tol),
            ]
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.analytic, self.oracle, self.abs_err, self.rel_err, self.tol]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Plot-ready two-column data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub name: String,
    pub columns: [String; 2],
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerEntry {
    pub scenario: String,
    pub delta: Vec<f64>,
    pub paper_literal_rel_err: Option<f64>,
    pub transport_corrected_rel_err: f64,
    pub exact_rel_err: f64,
    pub analytically_distinct: bool,
    pub tol: f64,
    pub winner: Winner,
}

impl LedgerEntry {
    fn from_outcome(scenario: &str, delta: &[f64], o: &VariantOutcome) -> Self {
        Self {
            scenario: scenario.into(),
            delta: delta.to_vec(),
            paper_literal_rel_err: o.paper_literal_rel_err,
            transport_corrected_rel_err: o.transport_corrected_rel_err,
            exact_rel_err: o.exact_rel_err,
            analytically_distinct: o.analytically_distinct,
            tol: o.tol,
            winner: o.winner,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineProvenance {
    pub mode: PairingMode,
    pub order_or_samples: usize,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioConfig,
    pub engine: EngineProvenance,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub variant_ledger: Vec<LedgerEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<Curve>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub variant: Option<VariantSelection>,
}

/// Failure of a scenario run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    /// The configuration is inconsistent; every problem found.
    Validation(Vec<String>),
    /// A numerical fault during execution.
    Numeric(Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Validation(v) => write!(f, "invalid scenario: {}", v.join("; ")),
            RunError::Numeric(e) => write!(f, "numeric fault: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> std::result::Result<ScenarioReport, RunError> {
    let prepared = prepare(cfg, opts).map_err(RunError::Validation)?;
    let engine = prepared.engine.clone();
    let mut out = Output::default();
    let result = match &prepared.built {
        Built::Logderiv { nu, field, phis } => run_logderiv(cfg, nu, field, phis, &engine, &mut out),
        Built::Family { setup, delta, phis } => match cfg.kind {
            ScenarioKind::Theorem1Check => run_theorem1(cfg, setup, delta, phis, &engine, prepared.variant, &mut out),
            _ => run_noether(cfg, setup, delta, phis, &engine, prepared.variant, &mut out),
        },
        Built::Anomaly {
            space,
            weight,
            family,
            delta,
            phis,
        } => run_anomaly(cfg, space, weight, family, delta, phis, &engine, &mut out),
    };
    result.map_err(RunError::Numeric)?;
    if let Some(bad) = out.checks.iter().find(|c| !c.is_finite()) {
        return Err(RunError::Numeric(Error::NonFinite {
            what: "check value",
            point: vec![bad.analytic, bad.oracle],
        }));
    }
    let pass = out.checks.iter().all(|c| c.pass);
    let mut scenario = cfg.clone();
    if let Some(v) = opts.variant {
        scenario.variant = Some(v);
    }
    Ok(ScenarioReport {
        scenario,
        engine: EngineProvenance {
            mode: engine.mode,
            order_or_samples: engine.order_or_samples,
            seed: engine.seed,
            workers: engine.workers,
        },
        checks: out.checks,
        variant_ledger: out.ledger,
        curves: out.curves,
        notes: out.notes,
        pass,
    })
}

#[derive(Default)]
struct Output {
    checks: Vec<Check>,
    ledger: Vec<LedgerEntry>,
    curves: Vec<Curve>,
    notes: Vec<String>,
}

fn curve(name: impl Into<String>, x: &str, y: &str, points: Vec<[f64; 2]>) -> Curve {
    Curve {
        name: name.into(),
        columns: [x.into(), y.into()],
        points,
    }
}

/// Step for the order study: large enough that truncation error dominates rounding.
const ORDER_STUDY_STEP: f64 = 2e-2;

fn run_logderiv(
    cfg: &ScenarioConfig,
    nu: &DensityMeasure,
    k: &VectorField,
    phis: &[TestFunction],
    engine: &PairingEngine,
    out: &mut Output,
) -> Result<()> {
    let tol = cfg.tolerance.unwrap_or(1e-6);
    let rows = phis
        .par_iter()
        .map(|phi| {
            let analytic = analytic_weak_derivative(nu, k, phi, engine)?;
            let oracle = weak_derivative_fd(nu, k, phi, engine, cfg.fd_step)?;
            let ibp = if nu.kind() == MeasureKind::Flat {
                None
            } else {
                Some(transport_weak_derivative(nu, k, phi, engine)?)
            };
            let study = weak_derivative_convergence(nu, k, phi, engine, ORDER_STUDY_STEP)?;
            Ok((phi.label().to_string(), analytic, oracle, ibp, study))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, (label, analytic, oracle, ibp, study)) in rows.into_iter().enumerate() {
        let tag = format!("{i}:{label}");
        out.checks.extend(Check::complex(&format!("eq1/{tag}"), analytic, oracle, tol));
        if let Some(ibp) = ibp {
            out.checks.extend(Check::complex(&format!("ibp/{tag}"), analytic, ibp, tol));
        }
        // below the quadrature floor (seen as the oracle-analytic gap) the
        // step differences carry no truncation signal
        let pick = |c: Complex64| if study.estimates[0].im.abs() > study.estimates[0].re.abs() { c.im } else { c.re };
        let floor = 100.0 * (oracle - analytic).norm();
        let [e0, e1, e2] = study.estimates.map(pick);
        match study.observed_order.and(fd::observed_order_above(e0, e1, e2, floor)) {
            Some(order) => out.checks.push(Check::new(format!("fd-order/{tag}"), 2.0, order, 0.1)),
            None => out.notes.push(format!("fd-order/{tag}: step differences at the rounding or quadrature floor")),
        }
        out.curves.push(curve(
            format!("fd-convergence-{i}"),
            "step",
            "abs_err",
            study
                .steps
                .iter()
                .zip(&study.estimates)
                .map(|(s, e)| [*s, (e - analytic).norm()])
                .collect(),
        ));
    }
    Ok(())
}

fn variant_list(selection: VariantSelection, n: usize, m: usize) -> Vec<Theorem1Variant> {
    match selection {
        VariantSelection::Paper => vec![Theorem1Variant::PaperLiteral],
        VariantSelection::Corrected => vec![Theorem1Variant::TransportCorrected],
        VariantSelection::Both if n == m => Theorem1Variant::ALL.to_vec(),
        VariantSelection::Both => vec![Theorem1Variant::TransportCorrected],
    }
}

fn run_theorem1(
    cfg: &ScenarioConfig,
    setup: &NoetherSetup,
    delta: &[f64],
    phis: &[TestFunction],
    engine: &PairingEngine,
    selection: VariantSelection,
    out: &mut Output,
) -> Result<()> {
    let tol = cfg.tolerance.unwrap_or(1e-5);
    let (n, m) = setup.dims();
    let points = fd::probe_points(n, cfg.probes, 2.0);
    let outcome = adjudicate_variants(setup, delta, phis, &points, engine, cfg.fd_step, tol)?;
    out.ledger.push(LedgerEntry::from_outcome(&cfg.name, delta, &outcome));
    let variants = variant_list(selection, n, m);
    for (i, row) in outcome.probes.iter().enumerate() {
        let tag = format!("{i}:{}", row.probe);
        out.checks.extend(Check::complex(&format!("exact-chain-rule/{tag}"), row.exact, row.oracle, tol));
        // the candidate closest to the oracle stands for the selection
        let best = variants
            .iter()
            .map(|v| match v {
                Theorem1Variant::PaperLiteral => (v.name(), row.paper_literal.unwrap_or_default()),
                Theorem1Variant::TransportCorrected => (v.name(), row.transport_corrected),
            })
            .min_by(|a, b| (a.1 - row.oracle).norm().total_cmp(&(b.1 - row.oracle).norm()))
            .expect("at least one variant is selected");
        let name = if variants.len() == 1 { best.0 } else { "best" };
        out.checks.extend(Check::complex(&format!("theorem1/{name}/{tag}"), best.1, row.oracle, tol));
    }
    if outcome.winner == Winner::Neither {
        out.notes.push("no index variant reproduces the finite-difference derivative; the exact chain-rule density does".into());
    }
    // δ-halving of the family oracle against the exact density
    if let Some(phi) = phis.first() {
        let exact = exact_pairing(setup, delta, phi, engine)?;
        let steps: Vec<f64> = (0..5).map(|k| 0.05 / f64::powi(2.0, k)).collect();
        let errs = steps
            .par_iter()
            .map(|&s| family_weak_derivative_fd(setup, delta, phi, engine, s).map(|d| [s, (d - exact).norm()]))
            .collect::<Result<Vec<_>>>()?;
        out.curves.push(curve("family-fd-convergence", "step", "abs_err", errs));
    }
    Ok(())
}

/// Probe points drawn from the measure when it has a sampler.
fn sampled_points(nu: &DensityMeasure, count: usize, seed: u64) -> Vec<Vec<f64>> {
    match nu.sampler() {
        Some(s) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            (0..count).map(|_| (s.draw)(&mut rng)).collect()
        }
        None => fd::probe_points(nu.dim(), count, 2.0),
    }
}

fn run_noether(
    cfg: &ScenarioConfig,
    setup: &NoetherSetup,
    delta: &[f64],
    phis: &[TestFunction],
    engine: &PairingEngine,
    selection: VariantSelection,
    out: &mut Output,
) -> Result<()> {
    let tols = NoetherTolerances {
        certificate: cfg.certificate_tol.unwrap_or(1e-8),
        residual: cfg.residual_tol.unwrap_or(1e-6),
        step: cfg.fd_step,
    };
    let expect_invariant = cfg.expect_invariant.unwrap_or(true);
    let (n, m) = setup.dims();
    let points = sampled_points(&setup.measure, cfg.probes, engine.seed);
    let variants = variant_list(selection, n, m);
    let reports = variants
        .iter()
        .map(|&v| noether_residual(setup, delta, &points, phis, engine, v, tols))
        .collect::<Result<Vec<_>>>()?;
    let first = &reports[0];
    let certificate = first.certificate;
    out.notes.push(
        "invariance is certified on the transformed weighted measure; a family with zero z-derivative would make the residual trivially zero".into(),
    );
    if expect_invariant {
        out.checks.push(Check::new(
            "invariance-certificate",
            0.0,
            certificate.max_abs_derivative,
            tols.certificate,
        ));
        let best = reports
            .iter()
            .min_by(|a, b| a.max_abs_residual.total_cmp(&b.max_abs_residual))
            .expect("at least one variant");
        let name = if reports.len() == 1 { best.variant.name() } else { "best" };
        out.checks.push(Check::new(format!("max-residual/{name}"), 0.0, best.max_abs_residual, tols.residual));
    } else {
        out.checks.push(Check::new(
            "flagged-not-invariant",
            1.0,
            f64::from(u8::from(first.status == NoetherStatus::NotInvariant)),
            0.0,
        ));
        if let Some(err) = translation_closed_form_error(cfg, setup, delta, &points, &reports)? {
            out.checks.push(Check::new("residual-closed-form", 0.0, err, 1e-8));
        }
    }
    for r in &reports {
        out.curves.push(curve(
            format!("residual-{}", r.variant.name()),
            "radius",
            "residual",
            points
                .iter()
                .zip(&r.residuals)
                .map(|(x, v)| [x.iter().map(|a| a * a).sum::<f64>().sqrt(), *v])
                .collect(),
        ));
    }
    Ok(())
}

/// For a translated Gaussian with an `x`-independent Lagrangian the
/// transport-corrected residual is `-<Σ^{-1}(x - mean), Δ> L`.
fn translation_closed_form_error(
    cfg: &ScenarioConfig,
    setup: &NoetherSetup,
    delta: &[f64],
    points: &[Vec<f64>],
    reports: &[crate::noether::NoetherReport],
) -> Result<Option<f64>> {
    let (Some(MeasureSpec::Gaussian { mean, covariance }), Some(FamilyConfig::TranslationFamily { .. }), Some(lag)) =
        (&cfg.measure, &cfg.family, cfg.lagrangian)
    else {
        return Ok(None);
    };
    if lag == LagrangianSpec::RadialGaussian {
        return Ok(None);
    }
    let Some(report) = reports.iter().find(|r| r.variant == Theorem1Variant::TransportCorrected) else {
        return Ok(None);
    };
    let n = mean.len();
    let cov = match covariance {
        Some(c) => matrix(c, "covariance")?,
        None => DMatrix::identity(n, n),
    };
    let precision = cov.try_inverse().ok_or_else(|| Error::Invalid("covariance is singular".into()))?;
    let d = nalgebra::DVector::from_column_slice(delta);
    let mut worst: f64 = 0.0;
    for (x, r) in points.iter().zip(&report.residuals) {
        let centered = nalgebra::DVector::from_iterator(n, x.iter().zip(mean).map(|(a, b)| a - b));
        let l = setup.lagrangian.value(x, &setup.field.g(x), &setup.field.g_prime(x));
        let expected = -(&precision * centered).dot(&d) * l;
        worst = worst.max((r - expected).abs());
    }
    Ok(Some(worst))
}

#[allow(clippy::too_many_arguments)]
fn run_anomaly(
    cfg: &ScenarioConfig,
    space: &LatticePathSpace,
    weight: &FeynmanWeight,
    family: &TransformationFamily,
    delta: &[f64],
    phis: &[TestFunction],
    engine: &PairingEngine,
    out: &mut Output,
) -> Result<()> {
    let tol = cfg.tolerance.unwrap_or(1e-8);
    let cert_tol = cfg.certificate_tol.unwrap_or(1e-12);
    let expect_invariant = cfg.expect_invariant.unwrap_or(true);
    let m = space.dim();
    let probes = fd::probe_points(m, cfg.probes, 2.0);
    let corollary_phi = phis.first().filter(|_| expect_invariant && m <= 4);
    let report = anomaly_report(
        family,
        delta,
        weight,
        &probes,
        cert_tol,
        corollary_phi.map(|phi| CorollaryProbe {
            phi,
            engine,
            step: cfg.fd_step,
            tol: 1e-6,
        }),
    )?;
    let applicable = report.status == CorollaryStatus::Applicable;
    if expect_invariant {
        out.checks.push(Check::new("action-derivative", 0.0, report.max_action_derivative, cert_tol));
    }
    out.checks.push(Check::new(
        "corollary-applicable",
        f64::from(u8::from(expect_invariant)),
        f64::from(u8::from(applicable)),
        0.0,
    ));
    out.checks.push(Check::new("anomaly-vs-fd-trace", 0.0, report.max_fd_trace_err, tol));

    // independent closed forms for the shipped generators
    let closed: Option<Box<dyn Fn(&[f64]) -> f64>> = match &cfg.family {
        Some(FamilyConfig::FlowFamily {
            field: FieldSpec::DeskGenerator { .. },
            ..
        }) => Some(Box::new(move |x: &[f64]| x[..m / 2].iter().sum::<f64>() * delta[0])),
        Some(FamilyConfig::ScalingFamily { .. }) => Some(Box::new(move |_: &[f64]| m as f64 * delta[0])),
        Some(FamilyConfig::TranslationFamily { .. }) => Some(Box::new(|_: &[f64]| 0.0)),
        _ => None,
    };
    if let Some(closed) = &closed {
        let worst = report
            .samples
            .iter()
            .map(|s| (s.anomaly - closed(&s.path)).abs())
            .fold(0.0, f64::max);
        out.checks.push(Check::new("anomaly-closed-form", 0.0, worst, tol));
    }
    if let Some(FamilyConfig::ScalingFamily { .. }) = &cfg.family {
        let at = report.samples.first().map_or(0.0, |s| s.anomaly);
        out.checks.push(Check::new("anomaly-equals-dimension", m as f64, at, 0.0));
    }
    if let Some(c) = &report.corollary {
        out.checks.extend(Check::complex("corollary-decomposition", c.predicted, c.fd_derivative, 1e-6));
        out.notes.push(format!(
            "regularization part of the derivative at eps = {}: {:.3e}",
            weight.epsilon(),
            c.regularization_part.norm()
        ));
    }
    if let Some(phi) = phis.first() {
        if weight.action().quadratic().is_some() && phi.wave_data().is_some() {
            let closed = fresnel_closed_form(weight, phi)?;
            let contour = fresnel_contour_quadrature(weight, phi, 80)?;
            out.checks.extend(Check::complex("fresnel-closed-vs-contour", closed, contour, 1e-8));
        }
    }

    // anomaly field along the first coordinate, other coordinates fixed
    let grid: Vec<[f64; 2]> = (0..41)
        .map(|i| {
            let x0 = -2.0 + 0.1 * i as f64;
            let mut path = vec![0.5; m];
            path[0] = x0;
            crate::pathspace::anomaly_term(space, family, delta, &path).map(|a| [x0, a])
        })
        .collect::<Result<Vec<_>>>()?;
    out.curves.push(curve("anomaly-field", "x1", "anomaly", grid));

    if let Some(steps) = &cfg.refinement {
        let desk = matches!(cfg.action, Some(ActionSpec::XyDeskAction { .. }));
        let refinement = anomaly_refinement(steps, |n| {
            let s = LatticePathSpace::new(1, n, 1.0)?;
            let fam = if desk {
                TransformationFamily::base_flow(0, desk_generator(&s))
            } else {
                TransformationFamily::base_scaling(s.dim(), 0)
            };
            Ok((s, fam, vec![1.0; s.dim()]))
        })?;
        for (i, (ratio, expected)) in refinement.ratios.iter().zip(&refinement.dimension_ratios).enumerate() {
            out.checks.push(Check::new(format!("refinement-ratio/{i}"), *expected, *ratio, 0.01));
        }
        out.curves.push(curve(
            "anomaly-vs-dimension",
            "M",
            "anomaly",
            refinement.points.iter().map(|(mm, a)| [*mm as f64, *a]).collect(),
        ));
    }
    Ok(())
}

/// Pointwise five-term breakdown, exposed for diagnostics.
pub fn five_terms_at(setup: &NoetherSetup, delta: &[f64], x: &[f64], variant: Theorem1Variant) -> Result<[f64; 5]> {
    theorem1_evaluate(setup, delta, x, variant).map(|t| t.terms)
}

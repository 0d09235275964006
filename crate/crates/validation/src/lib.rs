//! Scenario matrices shared by the acceptance suite.

use logderiv::scenario::{
    ConfigurationSpec, EngineSpec, FamilyConfig, FieldSpec, LagrangianSpec, MeasureSpec, ScenarioConfig, ScenarioKind,
    TestFunctionSpec,
};
use logderiv::{Monomial, PairingMode};

pub fn poly(terms: &[(f64, &[u32])], center: Vec<f64>, width: f64) -> TestFunctionSpec {
    TestFunctionSpec::PolynomialTimesGaussian {
        terms: terms.iter().map(|(c, p)| Monomial::new(*c, p.to_vec())).collect(),
        center,
        width: Some(width),
    }
}

pub fn gh(order: usize) -> EngineSpec {
    EngineSpec {
        mode: PairingMode::GaussHermiteQuadrature,
        order: Some(order),
        samples: None,
        seed: None,
        workers: None,
        bounds: None,
        panels: None,
    }
}

pub fn grid(n: usize, panels: usize, order: usize) -> EngineSpec {
    EngineSpec {
        mode: PairingMode::TensorGridQuadrature,
        order: Some(order),
        samples: None,
        seed: None,
        workers: None,
        bounds: Some(vec![[-5.0, 5.0]; n]),
        panels: Some(panels),
    }
}

pub fn unit_powers(n: usize, axis: usize, p: u32) -> Vec<u32> {
    let mut v = vec![0; n];
    v[axis] = p;
    v
}

pub fn gaussian_spec(n: usize) -> MeasureSpec {
    let mean: Vec<f64> = (0..n).map(|i| 0.2 - 0.15 * i as f64).collect();
    let cov: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 - 0.1 * i as f64 } else { 0.2 }).collect())
        .collect();
    MeasureSpec::Gaussian {
        mean,
        covariance: Some(cov),
    }
}

pub fn fields(n: usize) -> Vec<FieldSpec> {
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.6 + 0.2 * i as f64 } else { 0.1 * (i as f64 - j as f64) }).collect())
        .collect();
    vec![
        FieldSpec::ConstantField {
            value: [0.5, -0.3, 0.2][..n].to_vec(),
        },
        FieldSpec::LinearField { matrix },
        FieldSpec::NonlinearField { dim: n, scale: 0.3 },
    ]
}

pub fn field_name(f: &FieldSpec) -> &'static str {
    match f {
        FieldSpec::ConstantField { .. } => "constant",
        FieldSpec::LinearField { .. } => "linear",
        _ => "nonlinear",
    }
}

/// Gaussian and flat measures in dimensions 1-3, constant, linear and
/// nonlinear fields, three test-function families. Compact bumps are not
/// analytic, so they are only paired on the one- and two-dimensional
/// flat-measure grids.
pub fn a1_matrix() -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for n in 1..=3 {
        let center: Vec<f64> = (0..n).map(|i| 0.3 - 0.25 * i as f64).collect();
        let freq: Vec<f64> = (0..n).map(|i| 0.8 - 0.5 * i as f64).collect();
        for field in fields(n) {
            let mut s = ScenarioConfig::new(&format!("gauss-{n}d-{}", field_name(&field)), ScenarioKind::LogderivCheck, "");
            s.measure = Some(gaussian_spec(n));
            s.field = Some(field.clone());
            s.test_functions = vec![
                poly(&[(1.0, &unit_powers(n, 0, 1)), (0.5, &unit_powers(n, n - 1, 2))], center.clone(), 1.2),
                TestFunctionSpec::PlaneWave { frequency: freq.clone() },
            ];
            s.engine = Some(gh([60, 60, 40][n - 1]));
            out.push(s);

            let mut s = ScenarioConfig::new(&format!("flat-{n}d-{}", field_name(&field)), ScenarioKind::LogderivCheck, "");
            s.measure = Some(MeasureSpec::FlatBox {
                bounds: vec![[-5.0, 5.0]; n],
            });
            s.field = Some(field);
            s.test_functions = vec![poly(&[(1.0, &unit_powers(n, 0, 2)), (-0.3, &vec![0; n])], center.clone(), 0.6)];
            if n < 3 {
                // resolving the bump's edge on a 3-D grid costs more than the whole time budget
                s.test_functions.push(TestFunctionSpec::CompactBump {
                    center: center.clone(),
                    radius: 2.5,
                });
            }
            s.engine = Some(match n {
                1 => grid(1, 40, 12),
                2 => grid(2, 20, 12),
                _ => grid(3, 5, 12),
            });
            out.push(s);
        }
    }
    out
}

pub struct T1Case {
    pub name: &'static str,
    pub n: usize,
    pub family: FamilyConfig,
    pub lagrangian: LagrangianSpec,
    pub configuration: ConfigurationSpec,
    pub delta: Vec<f64>,
}

pub fn t1_cases() -> Vec<T1Case> {
    use ConfigurationSpec as C;
    use FamilyConfig as F;
    use LagrangianSpec as L;
    let affine1 = |b: f64, c: f64| C::Affine {
        matrix: vec![vec![b]],
        offset: vec![c],
    };
    let affine2 = C::Affine {
        matrix: vec![vec![0.7, 0.2], vec![-0.1, 0.5]],
        offset: vec![0.1, -0.3],
    };
    vec![
        T1Case { name: "identity", n: 1, family: F::IdentityFamily { p: 1, n: 1, m: 1 }, lagrangian: L::FieldSquare, configuration: affine1(1.0, 0.2), delta: vec![1.0] },
        T1Case { name: "field-shift-1d", n: 1, family: F::FieldShiftFamily { n: 1, m: 1 }, lagrangian: L::FieldSquare, configuration: affine1(1.0, 0.2), delta: vec![1.0] },
        T1Case { name: "field-shift-2d-free", n: 2, family: F::FieldShiftFamily { n: 2, m: 2 }, lagrangian: L::FreeField, configuration: affine2.clone(), delta: vec![0.6, -0.8] },
        T1Case { name: "field-source-linear", n: 1, family: F::FieldSourceFamily { n: 1, m: 1, power: 1 }, lagrangian: L::Unit, configuration: affine1(1.0, 0.0), delta: vec![1.0] },
        T1Case { name: "field-source-square", n: 1, family: F::FieldSourceFamily { n: 1, m: 1, power: 2 }, lagrangian: L::FieldSquare, configuration: affine1(0.5, 0.1), delta: vec![1.0] },
        T1Case { name: "field-source-2d-sum", n: 2, family: F::FieldSourceFamily { n: 2, m: 2, power: 1 }, lagrangian: L::FieldSum, configuration: affine2.clone(), delta: vec![1.0] },
        T1Case { name: "field-shift-free-1d", n: 1, family: F::FieldShiftFamily { n: 1, m: 1 }, lagrangian: L::FreeField, configuration: C::Square, delta: vec![0.5] },
        T1Case { name: "translation-1d", n: 1, family: F::TranslationFamily { n: 1, m: 1 }, lagrangian: L::FieldSquare, configuration: affine1(1.0, 0.0), delta: vec![1.0] },
        T1Case { name: "translation-2d", n: 2, family: F::TranslationFamily { n: 2, m: 2 }, lagrangian: L::FieldSquare, configuration: affine2, delta: vec![0.6, -0.4] },
        T1Case { name: "scaling-1d", n: 1, family: F::ScalingFamily { n: 1, m: 1 }, lagrangian: L::FieldSquare, configuration: affine1(1.0, 0.3), delta: vec![1.0] },
        T1Case { name: "rotation-radial", n: 2, family: F::RotationFamily { m: 2 }, lagrangian: L::RadialGaussian, configuration: C::Constant { value: vec![0.0, 0.0] }, delta: vec![1.0] },
    ]
}


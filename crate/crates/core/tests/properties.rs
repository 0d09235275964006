use std::sync::Arc;

use logderiv::noether::TransformationFamily;
use logderiv::pathspace::{
    anomaly_term, desk_generator, fresnel_closed_form, fresnel_contour_quadrature, BlockProductAction, FeynmanWeight,
    InitialData, LatticePathSpace, PathAction, QuadraticAction,
};
use logderiv::scenario::Check;
use logderiv::transport::{analytic_weak_derivative, pushforward_pairing, transport_weak_derivative};
use logderiv::{
    log_derivative_along_field, log_derivative_along_vector, pair, DensityMeasure, Monomial, PairingEngine,
    TestFunction, VectorField,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vec_in(n: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-r..r, n)
}

fn correlated_gaussian(rho: f64) -> DensityMeasure {
    DensityMeasure::gaussian(&[0.3, -0.2], &DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 0.8])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_derivative_is_linear_in_direction(
        x in vec_in(2, 3.0), h1 in vec_in(2, 2.0), h2 in vec_in(2, 2.0),
        a in -2.0..2.0f64, b in -2.0..2.0f64, rho in -0.5..0.5f64,
    ) {
        let nu = correlated_gaussian(rho);
        let combo: Vec<f64> = h1.iter().zip(&h2).map(|(p, q)| a * p + b * q).collect();
        let lhs = log_derivative_along_vector(&nu, &combo, &x).unwrap();
        let rhs = a * log_derivative_along_vector(&nu, &h1, &x).unwrap() + b * log_derivative_along_vector(&nu, &h2, &x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn log_derivative_ignores_normalization(x in vec_in(2, 3.0), h in vec_in(2, 2.0), c in 0.01..100.0f64) {
        let nu = correlated_gaussian(0.2);
        let a = log_derivative_along_vector(&nu, &h, &x).unwrap();
        let b = log_derivative_along_vector(&nu.scaled(c), &h, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn flat_measure_has_no_score(x in vec_in(3, 5.0), h in vec_in(3, 2.0)) {
        prop_assert_eq!(log_derivative_along_vector(&DensityMeasure::flat(3), &h, &x).unwrap(), 0.0);
    }

    #[test]
    fn constant_field_reduces_to_vector_derivative(x in vec_in(2, 3.0), h in vec_in(2, 2.0)) {
        let nu = correlated_gaussian(-0.3);
        let along_field = log_derivative_along_field(&nu, &VectorField::constant(h.clone()), &x).unwrap();
        let along_vector = log_derivative_along_vector(&nu, &h, &x).unwrap();
        prop_assert!((along_field - along_vector).abs() <= 1e-12 * (1.0 + along_vector.abs()));
    }

    #[test]
    fn linear_field_adds_its_trace(x in vec_in(2, 3.0), m in vec_in(4, 1.5)) {
        let nu = DensityMeasure::flat(2);
        let k = VectorField::linear(DMatrix::from_row_slice(2, 2, &m)).unwrap();
        let beta = log_derivative_along_field(&nu, &k, &x).unwrap();
        prop_assert!((beta - (m[0] + m[3])).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weak_derivative_is_linear_in_the_test_function(
        c in vec_in(2, 1.0), a in -2.0..2.0f64, b in -2.0..2.0f64, m in vec_in(4, 1.0),
    ) {
        let nu = correlated_gaussian(0.1);
        let k = VectorField::linear(DMatrix::from_row_slice(2, 2, &m)).unwrap();
        let engine = PairingEngine::gauss_hermite(30);
        let mk = |terms: Vec<Monomial>| TestFunction::polynomial_times_gaussian(terms, c.clone(), Some(1.0)).unwrap();
        let px = mk(vec![Monomial::new(1.0, vec![1, 0])]);
        let py = mk(vec![Monomial::new(1.0, vec![0, 1])]);
        let combo = mk(vec![Monomial::new(a, vec![1, 0]), Monomial::new(b, vec![0, 1])]);
        let d = |phi: &TestFunction| analytic_weak_derivative(&nu, &k, phi, &engine).unwrap();
        let lhs = d(&combo);
        let rhs = d(&px) * a + d(&py) * b;
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()));
        // the integrated-by-parts form agrees for any probe
        let t = transport_weak_derivative(&nu, &k, &combo, &engine).unwrap();
        prop_assert!((lhs - t).norm() <= 1e-8 * (1.0 + lhs.norm()));
    }

    #[test]
    fn pushforward_at_zero_time_is_the_pairing(w in vec_in(2, 1.5), h in vec_in(2, 1.0)) {
        let nu = correlated_gaussian(0.25);
        let phi = TestFunction::plane_wave(w);
        let engine = PairingEngine::gauss_hermite(24);
        let at_zero = pushforward_pairing(&nu, &VectorField::constant(h), 0.0, &phi, &engine).unwrap().value;
        let direct = pair(&nu, &phi, &engine).unwrap().value;
        prop_assert_eq!(at_zero, direct);
    }

    #[test]
    fn scaling_anomaly_is_path_dimension(steps in 1usize..6, d in 1usize..3, x in vec_in(20, 3.0), z in -2.0..2.0f64) {
        let space = LatticePathSpace::new(d, steps, 1.0).unwrap();
        let m = space.dim();
        let a = anomaly_term(&space, &TransformationFamily::base_scaling(m, 0), &[z], &x[..m]).unwrap();
        prop_assert!((a - z * m as f64).abs() <= 1e-12 * (m as f64));
    }

    #[test]
    fn desk_generator_preserves_the_action_and_its_anomaly_is_sum_of_q(steps in 1usize..5, x in vec_in(8, 2.0)) {
        let space = LatticePathSpace::new(1, steps, 1.0).unwrap();
        let m = space.dim();
        let path = &x[..m];
        let k = desk_generator(&space);
        let s = BlockProductAction::new(space);
        let dir: f64 = s.gradient(path).iter().zip(k.value(path)).map(|(g, v)| g * v).sum();
        prop_assert!(dir.abs() <= 1e-12 * (1.0 + path.iter().map(|v| v * v).sum::<f64>()));
        let a = anomaly_term(&space, &TransformationFamily::base_flow(0, k), &[1.0], path).unwrap();
        let expected: f64 = path[..steps].iter().sum();
        prop_assert!((a - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    fn fresnel_closed_form_matches_contour(a in -5.0..5.0f64, eps in 0.01..2.0f64, w in -1.0..1.0f64) {
        let weight = FeynmanWeight::from_action(Arc::new(QuadraticAction::scalar(a)), InitialData::Unit, eps, vec![], vec![]).unwrap();
        let phi = TestFunction::plane_wave(vec![w]);
        let closed = fresnel_closed_form(&weight, &phi).unwrap();
        let contour = fresnel_contour_quadrature(&weight, &phi, 40).unwrap();
        prop_assert!((closed - contour).norm() <= 1e-10 * closed.norm());
    }

    #[test]
    fn check_pass_is_derivable_from_recorded_numbers(a in -1e3..1e3f64, o in -1e3..1e3f64, tol in 0.0..1.0f64) {
        let c = Check::new("x", a, o, tol);
        prop_assert_eq!(c.pass, c.rel_err <= c.tol);
        prop_assert!((c.rel_err - (a - o).abs() / a.abs().max(1.0)).abs() <= 1e-15 * c.rel_err.max(1.0));
    }
}

#[test]
fn monte_carlo_is_bit_reproducible_per_worker_count() {
    let nu = correlated_gaussian(0.2);
    let phi = TestFunction::plane_wave(vec![0.5, -0.3]);
    for workers in [1, 2, 5] {
        let e = PairingEngine::monte_carlo(20_000, 11, workers);
        let a = pair(&nu, &phi, &e).unwrap();
        let b = pair(&nu, &phi, &e).unwrap();
        assert_eq!(a.value.re.to_bits(), b.value.re.to_bits());
        assert_eq!(a.value.im.to_bits(), b.value.im.to_bits());
    }
}

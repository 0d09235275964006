"""Smoke test for the logderiv Python bindings.

Build and install first:  pip install -e crates/python --no-build-isolation
"""
import math

import logderiv as ld


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    nu = ld.Measure.gaussian([0.3, -0.2], [[1.0, 0.2], [0.2, 0.8]])
    h = [1.0, -0.5]
    x = [0.4, 1.1]

    # score against a central difference of the log-density
    step = 1e-5
    up = nu.log_density([x[0] + step * h[0], x[1] + step * h[1]])
    down = nu.log_density([x[0] - step * h[0], x[1] - step * h[1]])
    assert close(nu.log_derivative(h, x), (up - down) / (2 * step), 1e-8)

    # flat measure: only the divergence remains
    k = ld.Field.linear([[0.5, 0.1], [-0.3, 0.25]])
    assert close(ld.Measure.flat(2).log_derivative_along_field(k, x), 0.75, 1e-12)

    engine = ld.Engine.gauss_hermite(30)
    phi = ld.TestFunction.polynomial_times_gaussian([(1.0, [1, 0]), (0.5, [0, 2])], [0.1, 0.0], 1.0)
    analytic = ld.weak_derivative(nu, k, phi, engine)
    by_parts = ld.weak_derivative_by_parts(nu, k, phi, engine)
    fd = ld.weak_derivative_fd(nu, k, phi, engine, 1e-4)
    assert abs(analytic - by_parts) < 1e-9, (analytic, by_parts)
    assert abs(analytic - fd) < 1e-6, (analytic, fd)

    # characteristic function of a Gaussian
    wave = ld.TestFunction.plane_wave([0.7])
    value, err = ld.pair(ld.Measure.gaussian([0.0]), wave, ld.Engine.gauss_hermite(40))
    assert err is None and abs(value - math.exp(-0.245)) < 1e-12

    mc = ld.Engine.monte_carlo(20000, 7, 2)
    a, se = ld.pair(nu, ld.TestFunction.plane_wave([0.5, -0.3]), mc)
    b, _ = ld.pair(nu, ld.TestFunction.plane_wave([0.5, -0.3]), mc)
    assert a == b and se > 0

    closed, contour = ld.fresnel_scalar(1.5, 0.05, 0.4)
    assert abs(closed - contour) <= 1e-10 * abs(closed)

    assert close(ld.scaling_anomaly(1, 4, 0.5, [0.1] * 8), 4.0, 1e-12)
    path = [0.3, -1.2, 0.7, 0.2]
    assert close(ld.flow_anomaly(1, 2, ld.Field.desk_generator(2), path), 0.3 - 1.2, 1e-12)

    assert any(e["name"] == "gaussian" for e in ld.catalog("measure"))
    names = ld.builtin_scenarios()
    assert "gaussian-eq1" in names

    report = ld.run_scenario("gaussian-eq1")
    assert report["pass"] and report["checks"]
    failing = ld.run_scenario("theorem1-field-shift", variant="paper")
    assert not failing["pass"]

    custom = {
        "name": "dict-scenario",
        "kind": "logderiv_check",
        "measure": {"builtin": "quartic-well", "dim": 1},
        "field": {"builtin": "nonlinear-field", "dim": 1, "scale": 0.5},
        "engine": {"mode": "gauss_hermite_quadrature", "order": 80},
    }
    assert ld.run_scenario(custom)["pass"]

    try:
        ld.run_scenario({"name": "bad", "kind": "logderiv_check"})
    except ValueError:
        pass
    else:
        raise AssertionError("expected a validation error")

    print(f"smoke test ok: {len(names)} builtin scenarios")


if __name__ == "__main__":
    main()

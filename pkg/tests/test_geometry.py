import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmcspheres import exprfield, geometry
from pmcspheres.geometry import (GeometryError, IntegratorSettings, OutOfDomainError, SingularMetricError,
                                 chart_from_strings, conformal, diagonal, euclidean)

from oracles import fd_christoffel, fd_ricci


def constant_curvature(dim, K):
    """Stereographic model 4 / (1 + K|x|^2)^2 I with sectional curvature K."""
    r2 = " + ".join(f"x{k + 1}^2" for k in range(dim))
    return diagonal([f"4 / (1 + {K!r}*({r2}))^2"] * dim, chart_radius=0.9)


BUILTIN = {
    "conformal2": conformal(2, 0.5),
    "conformal3": conformal(3, 0.3),
    "diagonal2": diagonal(["exp(2*x2)", "1 + x1^2"]),
    "explicit3": chart_from_strings([["1 + x2^2", "0.1*x3", "0"], [None, "2 + sin(x1)", "0"], [None, None, "1"]], 0.8),
    "sphere2": constant_curvature(2, 1.0),
    "sphere3": constant_curvature(3, 0.5),
}


def test_chart_rejects_non_symmetric_references():
    one, x = exprfield.parse("1", 2), exprfield.parse("0.1*x1", 2)
    with pytest.raises(GeometryError):
        geometry.MetricChart(2, [[one, x], [exprfield.parse("0.1*x1", 2), one]], 1.0)


def test_chart_rejects_indefinite_metric():
    with pytest.raises(GeometryError, match="positive definite"):
        diagonal(["1", "1 - 4*x1^2"])


def test_chart_rejects_undefined_metric():
    with pytest.raises(GeometryError):
        diagonal(["1", "log(x1 + 0.5)"])


def test_flat_christoffel_vanishes():
    assert not np.any(geometry.christoffel(euclidean(3), np.array([0.1, -0.2, 0.3])))


def test_exponential_metric_christoffel():
    G = geometry.christoffel(diagonal(["exp(2*x2)", "1"]), np.zeros(2))
    assert G[0, 0, 1] == pytest.approx(1.0, abs=1e-14)
    assert G[0, 1, 0] == G[0, 0, 1]


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_christoffel_matches_finite_differences(name):
    chart = BUILTIN[name]
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.uniform(-0.3, 0.3, chart.dim)
        G = geometry.christoffel(chart, x)
        assert np.max(np.abs(G - fd_christoffel(chart, x))) < 1e-9
        assert np.array_equal(G, G.transpose(0, 2, 1))


def test_scaled_metric_christoffel():
    chart = diagonal(["(1 + x1)^2", "(1 + x1)^2"])
    G = geometry.christoffel(chart, np.zeros(2))
    np.testing.assert_allclose(G, fd_christoffel(chart, np.zeros(2)), atol=1e-10)
    assert G[0, 0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_ricci_matches_riemann_oracle(name):
    chart = BUILTIN[name]
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.25, 0.25, size=(chart.dim, 50))
    R = geometry.ricci(chart, pts)
    for k in range(0, 50, 5):
        assert np.max(np.abs(R[..., k] - fd_ricci(chart, pts[:, k]))) < 1e-6
    assert np.array_equal(R, np.swapaxes(R, 0, 1))


def test_conformal_ricci_at_origin():
    np.testing.assert_allclose(geometry.ricci(conformal(2, 0.5), np.zeros(2)), -2 * np.eye(2), atol=1e-14)
    assert not np.any(geometry.ricci(euclidean(2), np.zeros(2)))


@pytest.mark.parametrize("dim,K", [(2, 1.0), (3, 0.5), (2, -0.7)])
def test_constant_curvature_identity(dim, K):
    chart = constant_curvature(dim, K)
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.3, 0.3, dim)
    R = geometry.ricci(chart, x)
    np.testing.assert_allclose(R, (dim - 1) * K * chart.metric(x), atol=1e-10)


def test_two_dimensional_ricci_is_proportional_to_metric():
    chart = BUILTIN["diagonal2"]
    x = np.array([0.2, -0.1])
    R, g = geometry.ricci(chart, x), chart.metric(x)
    assert abs(R[0, 0] / g[0, 0] - R[1, 1] / g[1, 1]) < 1e-12
    assert abs(R[0, 1]) < 1e-12 and g[0, 1] == 0


def test_singular_metric_detected():
    chart = diagonal(["1", "1e-14"])
    with pytest.raises(SingularMetricError):
        geometry.christoffel(chart, np.zeros(2))


# --------------------------------------------------------------------------
# exponential map


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.25, 0.25), min_size=3, max_size=3), st.lists(st.floats(-0.25, 0.25), min_size=3, max_size=3))
def test_flat_exponential_is_translation(base, v):
    got = geometry.exp_map(euclidean(3), np.array(base), np.array(v))
    np.testing.assert_array_equal(got, np.array(base) + np.array(v))


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_zero_velocity(name):
    chart = BUILTIN[name]
    base = np.full(chart.dim, 0.1)
    x, Y = geometry.exp_map(chart, base, np.zeros(chart.dim), differential=True)
    np.testing.assert_allclose(x, base, atol=0)
    np.testing.assert_allclose(Y, np.eye(chart.dim), atol=1e-15)


def test_step_halving_agreement():
    chart = conformal(2, 0.5)
    base, v = np.array([0.1, -0.05]), np.array([0.35, 0.2])
    n = chart.integrator.steps_for(np.linalg.norm(v))
    a = geometry.exp_map(chart, base, v, steps=n)
    b = geometry.exp_map(chart, base, v, steps=2 * n)
    assert np.max(np.abs(a - b)) <= 1e-10


def test_integrator_order():
    chart = conformal(2, 0.5)
    base, v = np.array([0.1, -0.05]), np.array([0.6, 0.3])
    ref = geometry.exp_map(chart, base, v, steps=256)
    steps = np.array([2, 4, 8, 16])
    err = [np.max(np.abs(geometry.exp_map(chart, base, v, steps=int(s)) - ref)) for s in steps]
    slope = -np.polyfit(np.log(steps), np.log(err), 1)[0]
    assert slope >= 4.5
    # the plain RK4 scheme alone is fourth order
    plain = conformal(2, 0.5, integrator=IntegratorSettings(richardson=False))
    ref = geometry.exp_map(plain, base, v, steps=1024)
    err = [np.max(np.abs(geometry.exp_map(plain, base, v, steps=int(s)) - ref)) for s in steps * 4]
    assert -np.polyfit(np.log(steps), np.log(err), 1)[0] == pytest.approx(4.0, abs=0.3)


def test_differential_matches_finite_differences():
    chart = BUILTIN["explicit3"]
    base, v = np.array([0.05, 0.1, -0.1]), np.array([0.2, -0.1, 0.15])
    _, Y = geometry.exp_map(chart, base, v, differential=True)
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (geometry.exp_map(chart, base, v + e) - geometry.exp_map(chart, base, v - e)) / (2 * h)
        assert np.max(np.abs(Y[:, j] - fd)) < 1e-8


def test_exit_time_reported():
    with pytest.raises(OutOfDomainError) as info:
        geometry.exp_map(euclidean(2), np.zeros(2), np.array([2.0, 0.0]))
    assert info.value.exit_time == pytest.approx(0.5)
    with pytest.raises(OutOfDomainError) as info:
        geometry.exp_map(conformal(2, 0.5), np.zeros(2), np.array([3.0, 0.0]))
    assert 0 < info.value.exit_time < 1


# --------------------------------------------------------------------------
# frames and transport


def test_flat_transport_keeps_basis():
    f = geometry.parallel_transport(euclidean(3), np.array([0.05, -0.02, 0.04]))
    np.testing.assert_array_equal(f.basis, np.eye(3))
    np.testing.assert_array_equal(f.center, [0.05, -0.02, 0.04])


def test_initial_frame_is_gram_schmidt():
    chart = BUILTIN["explicit3"]
    f = geometry.parallel_transport(chart, np.zeros(3))
    assert not np.any(f.center)
    np.testing.assert_allclose(f.basis, geometry.gram_schmidt(chart.metric(np.zeros(3))), atol=0)
    assert np.allclose(np.triu(f.basis), f.basis)  # Gram-Schmidt of coordinate axes is upper triangular


@pytest.mark.parametrize("name", ["conformal2", "conformal3", "explicit3"])
def test_transport_is_isometric(name):
    chart = BUILTIN[name]
    rng = np.random.default_rng(5)
    for _ in range(20):
        tau = rng.normal(size=chart.dim)
        tau *= rng.uniform(0, chart.chart_radius / 8) / np.linalg.norm(tau)
        f = geometry.parallel_transport(chart, tau)
        assert np.max(np.abs(f.gram(chart) - np.eye(chart.dim))) <= 1e-9
        assert f.drift <= 1e-10


def test_transport_radius_limit():
    with pytest.raises(OutOfDomainError):
        geometry.parallel_transport(conformal(2, 0.5), np.array([0.2, 0.0]))


def test_rotated_initial_basis_is_accepted():
    chart = conformal(2, 0.5)
    c, s = np.cos(0.3), np.sin(0.3)
    Q = np.array([[c, -s], [s, c]])
    f = geometry.parallel_transport(chart, np.array([0.05, 0.02]), initial_basis=Q)
    g = geometry.parallel_transport(chart, np.array([0.05, 0.02]))
    # transport is linear in the initial basis
    np.testing.assert_allclose(f.basis, g.basis @ Q, atol=1e-12)
    with pytest.raises(GeometryError):
        geometry.parallel_transport(chart, np.zeros(2), initial_basis=2 * np.eye(2))


# --------------------------------------------------------------------------
# rescaled metric


def _sample_ball(dim, count, seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(dim, count))
    return y / np.linalg.norm(y, axis=0) * 2 * rng.uniform(size=count) ** (1 / dim) * 0.999


def test_flat_rescaled_metric_is_identity():
    chart = euclidean(3)
    rm = geometry.rescaled_metric(chart, geometry.parallel_transport(chart, np.array([0.1, 0, 0])), 0.05)
    d = rm.evaluate(_sample_ball(3, 40, 0))
    np.testing.assert_allclose(d.gbar, np.eye(3)[:, :, None] * np.ones(40), atol=1e-14)
    assert np.max(np.abs(d.dgbar)) < 1e-13


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_rescaled_metric_identity_at_center(name):
    chart = BUILTIN[name]
    frame = geometry.parallel_transport(chart, np.full(chart.dim, 0.03))
    d = geometry.rescaled_metric(chart, frame, 0.1).evaluate(np.zeros((chart.dim, 1)))
    np.testing.assert_allclose(d.gbar[..., 0], np.eye(chart.dim), atol=1e-9)
    assert np.array_equal(d.gbar, np.swapaxes(d.gbar, 0, 1))


@pytest.mark.parametrize("name", ["conformal2", "conformal3", "sphere3"])
def test_rescaled_derivative_matches_five_point_differences(name):
    chart = BUILTIN[name]
    frame = geometry.parallel_transport(chart, np.full(chart.dim, 0.02))
    rm = geometry.rescaled_metric(chart, frame, 0.1)
    y = _sample_ball(chart.dim, 6, 3) * 0.9
    d = rm.evaluate(y)
    h = 1e-4
    for c in range(chart.dim):
        e = np.zeros((chart.dim, 1))
        e[c] = h
        vals = [rm.evaluate(y + k * e, derivatives=False).gbar for k in (-2, -1, 1, 2)]
        fd = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
        assert np.max(np.abs(d.dgbar[:, :, c] - fd)) <= 1e-6


def test_rescaled_metric_small_r_limit():
    chart = conformal(3, 0.5)
    frame = geometry.parallel_transport(chart, np.array([0.02, -0.01, 0.03]))
    d = geometry.rescaled_metric(chart, frame, 1e-6).evaluate(_sample_ball(3, 30, 9))
    assert np.max(np.abs(d.gbar - np.eye(3)[:, :, None])) <= 1e-4


def test_rescaled_pullback_formula():
    # gbar(y) = r^-2 dpsi^T g(psi) dpsi, checked against the plain exponential map
    chart = BUILTIN["explicit3"]
    frame = geometry.parallel_transport(chart, np.array([0.01, 0.02, 0.0]))
    r = 0.08
    y = _sample_ball(3, 4, 12)
    d = geometry.rescaled_metric(chart, frame, r).evaluate(y, derivatives=False)
    for k in range(4):
        x, Y = geometry.exp_map(chart, frame.center, r * frame.basis @ y[:, k], differential=True)
        J = Y @ (r * frame.basis)
        # batch and single integrations choose different step counts, so agree to the integrator budget
        np.testing.assert_allclose(d.gbar[..., k], J.T @ chart.metric(x) @ J / r**2, atol=1e-10)


def test_rescaled_ball_must_fit():
    chart = euclidean(2)
    with pytest.raises(OutOfDomainError):
        geometry.rescaled_metric(chart, geometry.parallel_transport(chart, np.zeros(2)), 0.6)

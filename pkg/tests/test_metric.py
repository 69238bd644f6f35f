import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmtk.errors import ConfigError, NoDecayError
from cmtk.metric import (BField, IntegralMetric, QuadratureConfig, build_metric, fit_log_decay,
                         rhs_C, tail_bound)
from cmtk.systems import polynomial_system
from cmtk.verify import annulus_sampler

PTS = annulus_sampler(0.6, 1.4)(100, np.random.default_rng(11))


def test_rhs_C_examples(circle):
    I = BField.identity(2)
    # f(1,0) = (0,1)
    assert np.allclose(rhs_C(circle, I, [1.0, 0.0]), [[1, 0], [0, 0]], atol=1e-15)
    # f = (1,1) at a point where f is diagonal: use the projection directly
    x = np.array([0.0, -1.0])  # f = (1, 0)
    assert np.allclose(rhs_C(circle, I, x), [[0, 0], [0, 1]], atol=1e-15)
    B = BField.constant([[2.0, 0.5], [0.5, 1.0]])
    for x in ([0.3, 0.8], [1.5, -0.2]):
        assert np.linalg.norm(rhs_C(circle, B, x) @ circle.rhs(np.array(x))) <= 1e-13


def test_rhs_C_f11_case():
    # linear field with f(x) = (1,1) at x = (1,0)
    sysd = polynomial_system(2, [[(1.0, (1, 0))], [(1.0, (1, 0))]])
    assert np.allclose(rhs_C(sysd, BField.identity(2), [1.0, 0.0]), [[0.5, -0.5], [-0.5, 0.5]])


def test_bad_B_rejected():
    with pytest.raises(ConfigError):
        BField.constant([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ConfigError):
        BField.constant([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ConfigError):
        BField.constant([1.0, 2.0])


def test_config_validation():
    with pytest.raises(ConfigError):
        QuadratureConfig(t_max=0)
    with pytest.raises(ConfigError):
        QuadratureConfig(rel_tail_tol=1.0)


def test_tail_bound_examples():
    assert np.isclose(tail_bound((1.0, 2.0), 10.0, 1.0), np.exp(-40) / 4, rtol=1e-14)
    vals = [tail_bound((1.5, 0.7), T, 2.0) for T in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    T = 3.0
    assert np.isclose(tail_bound((1.5, 0.7), 2 * T, 2.0) / tail_bound((1.5, 0.7), T, 2.0),
                      np.exp(-2 * 0.7 * T), rtol=1e-12)
    with pytest.raises(NoDecayError):
        tail_bound((1.0, 0.0), 1.0, 1.0)


def test_fit_log_decay_exact():
    t = np.linspace(0, 10, 101)
    k, c, cenv, r2, cnt = fit_log_decay(t, 3 * np.exp(-1.5 * t))
    assert np.isclose(k, 1.5) and np.isclose(c, 3) and np.isclose(cenv, 3) and r2 > 0.999999


def test_circle_metric_oracle(circle_metric):
    s = circle_metric.evaluate([1.0, 0.0])
    assert np.max(np.abs(s.M - np.diag([0.25, 1.0]))) <= 1e-4
    assert s.ok and s.error_bound < 1e-6


def _scipy_metric(sysd, x, B, c0, T=25.0):
    """Independent route: DOP853 on trajectory, Phi and the integrand."""
    from scipy.integrate import solve_ivp
    n = sysd.dimension

    def rhs(t, y):
        z = y[:n]
        Phi = y[n:n + n * n].reshape(n, n)
        f = sysd.rhs(z)
        P = np.eye(n) - np.outer(f, f) / (f @ f)
        G = P @ Phi
        return np.concatenate([f, (sysd.jacobian(z) @ Phi).ravel(), (G.T @ B @ G).ravel()])

    y0 = np.concatenate([x, np.eye(n).ravel(), np.zeros(n * n)])
    sol = solve_ivp(rhs, (0, T), y0, method="DOP853", rtol=1e-12, atol=1e-13)
    M1 = sol.y[n + n * n:, -1].reshape(n, n)
    f = sysd.rhs(np.asarray(x))
    return M1 + c0 * np.outer(f, f)


@pytest.mark.parametrize("x", [[0.7, 0.0], [1.3, -0.4], [0.2, 0.9]])
def test_circle_metric_independent_route(circle, circle_metric, x):
    ref = _scipy_metric(circle, np.array(x), np.eye(2), 1.0)
    assert np.max(np.abs(circle_metric.eval(x) - ref)) <= 1e-7


def test_vdp_metric_independent_route(vdp, vdp_metric):
    x = np.array([1.5, 0.5])
    ref = _scipy_metric(vdp, x, np.eye(2), 1.0, T=60.0)
    assert np.max(np.abs(vdp_metric.eval(x) - ref)) <= 1e-6 * max(1, np.abs(ref).max())


def test_normalization_everywhere(circle, circle_metric):
    for s in circle_metric.evaluate_many(PTS):
        f = circle.rhs(s.x)
        assert abs(f @ s.M @ f / (f @ f) ** 2 - 1.0) <= max(s.error_bound, 1e-10)
        assert np.linalg.norm(s.M1 @ f) / np.linalg.norm(f) <= s.error_bound
        assert np.linalg.eigvalsh(s.M)[0] > 0
        assert np.array_equal(s.M, s.M.T)


def test_x0_normalization(circle, circle_orbit, circle_metric):
    x0 = circle_orbit.anchor
    f = circle.rhs(x0)
    assert np.isclose(f @ circle_metric.eval(x0) @ f, (f @ f) ** 2, rtol=1e-6)


def test_monotone_refinement(circle):
    x = np.array([0.9, 0.8])
    prev = None
    for tol in (1e-4, 1e-5, 1e-6):
        s = IntegralMetric(circle, config=QuadratureConfig(rel_tail_tol=tol, t_max=2.0)).evaluate(x)
        if prev is not None:
            assert np.linalg.norm(s.M - prev.M, 2) <= prev.error_bound
        prev = s


def test_vdp_kernel_and_pd(vdp, vdp_metric, vdp_orbit):
    X = vdp_orbit.samples[::20] * 1.01
    for s in vdp_metric.evaluate_many(X):
        f = vdp.rhs(s.x)
        assert np.linalg.norm(s.M1 @ f) / np.linalg.norm(f) <= s.error_bound
        assert np.linalg.eigvalsh(s.M)[0] > 0


def test_polynomial_B(circle):
    # B(x) = diag(1 + x^2, 2)
    B = BField.polynomial(2, [[(1.0, (0, 0)), (1.0, (2, 0))], [(0.0, (0, 0))],
                              [(0.0, (0, 0))], [(2.0, (0, 0))]])
    assert np.allclose(B(np.array([[2.0, 0.0]])), [[[5, 0], [0, 2]]])
    s = build_metric(circle, B).evaluate([1.0, 0.0])
    assert np.linalg.eigvalsh(s.M)[0] > 0


def test_failure_isolated_per_row(circle):
    m = build_metric(circle)
    recs = m.evaluate_many(np.array([[1.0, 0.0], [0.0, 0.0]]), raise_errors=False)
    assert recs[0].ok and recs[1].status == "EquilibriumError"


def test_not_in_basin():
    # x' = x, y' = 1 + y^2 ... use a planar linear saddle-like flow without a periodic orbit
    sysd = polynomial_system(2, [[(1.0, (0, 0))], [(1.0, (0, 1))]], bound=1e8)
    recs = build_metric(sysd, config=QuadratureConfig(t_max=2.0, max_doublings=2)).evaluate_many(
        np.array([[0.0, 1.0]]), raise_errors=False)
    assert not recs[0].ok


def test_cache_and_concurrency(circle):
    m = build_metric(circle, jobs=4)
    X = PTS[:16]
    a = m.eval_many(X)
    assert len(m._cache) == 16
    b = build_metric(circle).eval_many(X)
    assert np.array_equal(a, b)
    out = []
    th = [threading.Thread(target=lambda: out.append(m.eval_many(X))) for _ in range(3)]
    for t in th:
        t.start()
    for t in th:
        t.join()
    assert all(np.array_equal(o, a) for o in out)


def test_identical_configs_identical(circle):
    c = QuadratureConfig(t_max=7.0)
    x = [0.9, 0.3]
    assert np.array_equal(build_metric(circle, config=c).eval(x), build_metric(circle, config=c).eval(x))


@settings(max_examples=8, deadline=None)
@given(st.floats(0.5, 1.5), st.floats(0, 2 * np.pi))
def test_property_symmetric_and_normalized(r, th):
    from cmtk.systems import circle_system
    sysd = circle_system()
    x = np.array([r * np.cos(th), r * np.sin(th)])
    s = build_metric(sysd, c0=2.0).evaluate(x)
    f = sysd.rhs(x)
    assert np.array_equal(s.M, s.M.T)
    assert abs(f @ s.M @ f / (f @ f) ** 2 - 2.0) <= max(s.error_bound, 1e-10)

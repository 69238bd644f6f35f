import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmtk.errors import (ConfigError, EmptyRegionError, HypothesisViolated, MetricDegenerateError,
                         NoDecayError, PerturbationTooLarge)
from cmtk.metric import BField, QuadratureConfig, build_metric, rhs_C_many
from cmtk.projection import AnalyticMetric, apply_L_many, constant_metric, rank_one_metric
from cmtk.systems import polynomial_system
from cmtk import verify as V

I2 = BField.identity(2)
ANNULUS = V.annulus_sampler(0.6, 1.4)


# ------------------------------------------------------------ contraction measure

def test_contraction_identity_metric(circle):
    s = V.contraction_measure(circle, constant_metric(np.eye(2)), [1.0, 0.0])
    assert abs(s.L_value + 2) <= 1e-12
    assert np.allclose(np.abs(s.argmax_v), [1, 0])


def test_contraction_constructed_metric(circle, circle_metric):
    s = V.contraction_measure(circle, circle_metric, [1.0, 0.0])
    assert abs(s.L_value + 2) <= 1e-3
    assert np.allclose(np.abs(s.argmax_v), [2, 0], atol=1e-6)


def test_argmax_invariants(vdp, vdp_metric):
    for x in ([2.0, 0.1], [-1.0, 1.5]):
        s = V.contraction_measure(vdp, vdp_metric, x)
        f = vdp.rhs(np.array(x))
        M = vdp_metric.eval(x)
        assert abs(s.argmax_v @ f) <= 1e-10 * np.linalg.norm(f)
        assert abs(s.argmax_v @ M @ s.argmax_v - 1) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000), st.floats(0.1, 50))
def test_argmax_direction_scale_invariant(n, seed, alpha):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    LM = A + A.T
    G = rng.standard_normal((n, n))
    M = G @ G.T + n * np.eye(n)
    f = rng.standard_normal(n)
    _, v1 = V.reduced_contraction(f, LM, M)
    _, v2 = V.reduced_contraction(f, LM, alpha * M)
    c = abs(v1 @ v2) / (np.linalg.norm(v1) * np.linalg.norm(v2))
    assert c >= 1 - 1e-8


def test_degenerate_metric(circle):
    with pytest.raises(MetricDegenerateError):
        V.contraction_measure(circle, rank_one_metric(circle), [1.0, 0.0])


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_pencil_matches_brute_force(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(5):
        A = rng.standard_normal((n, n))
        LM = A + A.T
        G = rng.standard_normal((n, n))
        M = G @ G.T + 0.5 * np.eye(n)
        f = rng.standard_normal(n)
        L, v = V.reduced_contraction(f, LM, M)
        Lb, _ = V.brute_force_contraction(f, LM, M, rng=rng)
        assert Lb <= L + 1e-9 * max(1.0, abs(L))
        assert L - Lb <= 1e-3 * max(1.0, abs(L))
        # random search alone is a lower bound
        Lr, _ = V.brute_force_contraction(f, LM, M, n_dirs=1000, rng=rng, polish=False)
        assert Lr <= L + 1e-9 * max(1.0, abs(L))


# ------------------------------------------------------------------ residual

def test_residual_annulus(circle, circle_metric):
    X = ANNULUS(100, np.random.default_rng(0))
    assert np.max(V.pde_residuals(circle, circle_metric, I2, X)) <= 1e-3


def test_residual_rank_one(circle):
    for x in ([1.0, 0.0], [0.4, 1.2]):
        assert abs(V.pde_residual(circle, rank_one_metric(circle), I2, x) - 1.0) <= 1e-7


def test_residual_linear_interpolation(circle, circle_metric):
    X = np.array([[0.9, 0.4], [1.2, -0.3]])
    m1, m2 = circle_metric, constant_metric(np.diag([2.0, 0.5]))
    a = 0.3
    mix = AnalyticMetric(lambda Y: a * m1.eval_many(Y) + (1 - a) * m2.eval_many(Y))

    def R(m):
        return apply_L_many(circle, m, X) + rhs_C_many(circle, I2, X)

    assert np.max(np.abs(R(mix) - (a * R(m1) + (1 - a) * R(m2)))) <= 1e-6


def test_residual_refines(circle):
    # observed order in the tolerance: slope of the mean log residual over
    # five points and five refinement levels; 0.1 slack for regression noise
    X = ANNULUS(5, np.random.default_rng(0))
    tols = np.array([1e-8, 1e-9, 1e-10, 1e-11, 1e-12])
    r = np.array([V.pde_residuals(circle, build_metric(circle, config=QuadratureConfig(
        step_ctrl=tol, rel_tail_tol=tol)), I2, X, tol=tol) for tol in tols])
    order = np.polyfit(np.log10(tols), np.log10(r).mean(axis=1), 1)[0]
    assert order >= 0.9
    assert r.max(axis=1)[-1] < r.max(axis=1)[0] / 1000


# ------------------------------------------------------------- certification

def test_certify_annulus(circle, circle_metric, circle_orbit):
    rep = V.certify_region(circle, circle_metric, ANNULUS, 100, B_field=I2, orbit=circle_orbit)
    assert rep.passed
    assert 0 < rep.nu_certified <= 2 + 1e-3
    assert circle_orbit.nontrivial_exponents[0].real <= -rep.nu_certified + 1e-3
    assert rep.nu_certified >= rep.eigen_ratio_bound - 1e-9
    for s in rep.samples:
        assert s.min_eig_M > 0 and s.L_value <= -rep.nu_certified + 1e-15


def test_certify_excludes_origin(circle, caplog):
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.1]])
    rep = V.certify_region(circle, constant_metric(np.eye(2)), pts)
    assert len(rep.samples) == 2 and rep.excluded[0]["reason"] == "equilibrium"
    assert "equilibrium" in caplog.text


def test_certify_empty_region(circle):
    with pytest.raises(EmptyRegionError):
        V.certify_region(circle, constant_metric(np.eye(2)), np.zeros((3, 2)))


def test_certify_deterministic(circle, circle_metric, circle_orbit):
    samp = V.tube_sampler(circle, circle_orbit, 0.05)
    a = V.certify_region(circle, circle_metric, samp, 20, B_field=I2, orbit=circle_orbit, seed=5)
    b = V.certify_region(circle, circle_metric, samp, 20, B_field=I2, orbit=circle_orbit, seed=5)
    assert a.nu_certified == b.nu_certified and a.verdict == b.verdict
    assert [s.L_value for s in a.samples] == [s.L_value for s in b.samples]


def test_load_points(tmp_path):
    p = tmp_path / "pts.txt"
    p.write_text("# header\n1 0\n0.5   0.5\n")
    assert np.array_equal(V.load_points(p), [[1, 0], [0.5, 0.5]])
    with pytest.raises(ConfigError):
        V.load_points(tmp_path / "missing.txt")


def test_tube_sampler_perpendicular(vdp, vdp_orbit):
    X = V.tube_sampler(vdp, vdp_orbit, 0.1)(50, np.random.default_rng(0))
    assert X.shape == (50, 2)


# ----------------------------------------------------------------- decay

def test_decay_on_orbit(circle):
    d = V.decay_fit(circle, [1.0, 0.0], 20.0, 200)
    assert d.rate >= 1.9 and d.n_used >= 10 and np.isfinite(d.rate)


def test_decay_off_orbit(circle):
    d = V.decay_fit(circle, [0.5, 0.0], 20.0, 200, warmup=5.0)
    assert d.rate >= 1.8
    assert d.sup_unprojected <= 10.0


def test_decay_derived_quantities(circle):
    d = V.decay_fit(circle, [1.0, 0.0], 20.0, 200)
    q = d.derived(2.0)
    assert np.isclose(d.rate, (2.0 - 2 * q["eps"]) / (1 + q["eps"]))
    assert np.isclose(q["kappa0"], d.rate / 2)


@pytest.mark.parametrize("which", ["circle", "vdp"])
def test_decay_matches_floquet(which, circle, vdp, circle_orbit, vdp_orbit):
    sysd, rec = (circle, circle_orbit) if which == "circle" else (vdp, vdp_orbit)
    d = V.decay_fit(sysd, rec.anchor, 20.0, 200)
    assert abs(d.rate - rec.nu) <= 0.1 * rec.nu


def test_no_decay():
    sysd = polynomial_system(2, [[(1.0, (0, 0))], [(1.0, (0, 1))]], bound=1e12)  # x'=1, y'=y
    with pytest.raises(NoDecayError):
        V.decay_fit(sysd, [0.0, 1.0], 10.0, 100)


def test_psi_decay(circle):
    for x in ([1.0, 0.0], [0.5, 0.0]):
        r = V.psi_decay_check(circle, x, 20.0, warmup=5.0)
        assert r.rate >= 1.8
        assert r.init_decomposition_error <= 1e-15
        assert r.phi0_tracking_error <= 1e-8


# ----------------------------------------------------------- conservation

def test_conservation_constructed(circle, circle_metric):
    c = V.conservation_checks(circle, circle_metric, [1.2, 0.3], np.linspace(0, 10, 11), c0=1.0)
    assert c.max_phi0_deviation <= 1e-4
    assert c.max_identity_error <= 1e-5


def test_conservation_identity_metric(circle):
    c = V.conservation_checks(circle, constant_metric(np.eye(2)), [0.8, -0.5], np.linspace(0, 5, 11))
    assert c.max_identity_error <= 1e-5


def test_conservation_zero_case(circle):
    x = np.array([0.9, 0.2])
    c = V.conservation_checks(circle, constant_metric(np.eye(2)), x, [0.0], phi2=circle.rhs(x))
    assert abs(c.lhs[0]) <= 1e-12 and abs(c.rhs[0]) <= 1e-12


# ------------------------------------------------------------- uniqueness

def test_uniqueness_horizons(circle):
    d = V.uniqueness_convergence(circle, I2, 1.0, None, [1.0, 0.0], QuadratureConfig(t_max=10),
                                 QuadratureConfig(t_max=20))
    assert d <= 1e-6


def test_uniqueness_identical(circle):
    c = QuadratureConfig(t_max=4.0)
    assert V.uniqueness_convergence(circle, I2, 1.0, None, [0.9, 0.4], c, c) == 0.0


def test_uniqueness_within_declared_bounds(circle):
    d, ea, eb = V.uniqueness_convergence(circle, I2, 1.0, None, [0.7, 0.9],
                                         QuadratureConfig(t_max=3, rel_tail_tol=1e-5),
                                         QuadratureConfig(t_max=20), return_bounds=True)
    assert d <= ea + eb


def test_uniqueness_shrinks(circle):
    x = [0.8, 0.7]
    ds = [V.uniqueness_convergence(circle, I2, 1.0, None, x, QuadratureConfig(t_max=1, rel_tail_tol=r),
                                   QuadratureConfig(t_max=3, rel_tail_tol=r, step_ctrl=1e-11))
          for r in (1e-3, 1e-4, 1e-5, 1e-6)]
    assert all(a >= b for a, b in zip(ds, ds[1:]))
    assert ds[-1] < ds[0]


# --------------------------------------------------------------- Gronwall

def test_gronwall_trivial():
    th = np.linspace(0, 1, 11)
    assert V.gronwall_check(th, 2.0, 2.0, 0.0, 1.0).holds


def test_gronwall_exponential():
    th = np.linspace(0, 3, 301)
    g = V.gronwall_check(th, np.exp(th), 1.0, 1.0, 1.0)
    assert g.holds


def test_gronwall_hypothesis_violated():
    th = np.linspace(0, 1, 11)
    with pytest.raises(HypothesisViolated):
        V.gronwall_check(th, 5.0, 1.0, 0.0, 1.0)


def test_gronwall_rejects_negative():
    th = np.linspace(0, 1, 5)
    with pytest.raises(ConfigError):
        V.gronwall_check(th, -1.0, 1.0, 1.0, 1.0)


def test_gronwall_decay_instance(circle):
    # r = |P psi| samples, a = envelope of the fitted decay, K b r-term small
    d = V.decay_fit(circle, [0.5, 0.0], 10.0, 200, warmup=0.0)
    th = np.concatenate([[0.0], d.times])
    r = np.concatenate([[1.0], d.values])
    a = d.envelope * np.exp(-d.rate * th)
    a = np.maximum(a, r)
    g = V.gronwall_check(th, r, a, 0.1, np.exp(-th))
    assert g.holds


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.1, 3.0))
def test_gronwall_exact_solution_property(K, b, a):
    # r = a exp(K b theta) solves the integral equation with equality
    th = np.linspace(0, 1, 2001)
    r = a * np.exp(K * b * th) * (1 - 1e-6)
    g = V.gronwall_check(th, r, a, K, b, rtol=1e-6)
    assert g.holds


# ---------------------------------------------------------- synchronisation

def test_sync_rate(circle, circle_metric, circle_orbit):
    e = V.sync_contraction_experiment(circle, circle_metric, circle_orbit, 1e-3, k=0.1)
    assert e.fitted_rate >= 3.6
    assert np.max(e.q_residuals) <= 1e-10
    M = circle_metric.eval(circle_orbit.anchor)
    assert np.isclose(e.A_series[0], np.sqrt(e.eta @ M @ e.eta), rtol=1e-12)
    assert abs(e.eta @ circle.rhs(circle_orbit.anchor)) <= 1e-15
    assert e.T_series[0] == 0.0
    assert np.max(np.abs(e.T_dot - 1)) <= 10 * 1e-3


def test_sync_zero_perturbation(circle, circle_metric, circle_orbit):
    e = V.sync_contraction_experiment(circle, circle_metric, circle_orbit, 0.0)
    assert np.all(e.A_series == 0)
    assert np.array_equal(e.T_series, e.theta_grid)


def test_sync_halving(circle, circle_metric, circle_orbit):
    a = V.sync_contraction_experiment(circle, circle_metric, circle_orbit, 1e-3).fitted_rate
    b = V.sync_contraction_experiment(circle, circle_metric, circle_orbit, 5e-4).fitted_rate
    assert abs(a - b) <= 0.05 * a


def test_sync_too_large(circle, circle_metric, circle_orbit):
    with pytest.raises(PerturbationTooLarge):
        V.sync_contraction_experiment(circle, circle_metric, circle_orbit, 1.5)


def test_sync_bad_k(circle, circle_metric, circle_orbit):
    with pytest.raises(ConfigError):
        V.sync_contraction_experiment(circle, circle_metric, circle_orbit, 1e-3, k=1.0)

"""Numerical checks of contraction, PDE residual, decay, uniqueness and synchronisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import LinAlgError, cholesky, eigh, solve_triangular
from scipy.spatial import cKDTree

from .errors import (ConfigError, EmptyRegionError, EquilibriumError, HypothesisViolated,
                     MetricDegenerateError, NoDecayError, PerturbationTooLarge)
from .metric import BField, IntegralMetric, QuadratureConfig, fit_log_decay, rhs_C_many
from .orbit import PeriodicOrbitRecord
from .projection import (MetricField, apply_L_many, lm_values, metric_and_orbital,
                         perp_basis, projection_matrix)
from . import integrate
from .systems import DEFAULT_TOL, CompactSetStats, SystemDef, flow

log = logging.getLogger(__name__)


# ------------------------------------------------------------ contraction measure

@dataclass
class ContractionSample:
    x: np.ndarray
    L_value: float
    argmax_v: np.ndarray
    min_eig_M: float
    residual_norm: float = np.nan


def reduced_contraction(f, LM, M):
    """Largest value of 1/2 v^T LM v subject to v^T f = 0, v^T M v = 1.

    Returns ``(L, v)``.  The constraint v^T f = 0 is eliminated with an
    orthonormal basis Q of f-perp; the remaining pencil (Q^T LM Q, Q^T M Q)
    is reduced by the Cholesky congruence Q^T M Q = R^T R.
    """
    Q = perp_basis(f, threshold=0.0)
    A = Q.T @ LM @ Q
    G = Q.T @ M @ Q
    G = 0.5 * (G + G.T)
    try:
        R = cholesky(G, lower=False)
    except LinAlgError as exc:
        raise MetricDegenerateError("reduced metric Q^T M Q is not positive definite") from exc
    W = solve_triangular(R, 0.5 * (A + A.T), trans="T")
    S = solve_triangular(R, W.T, trans="T")
    S = 0.5 * (S + S.T)
    lam, Y = eigh(S)
    w = solve_triangular(R, Y[:, -1])
    return 0.5 * float(lam[-1]), Q @ w


def contraction_measure(sys: SystemDef, metric: MetricField, x, *, LM=None, M=None,
                        h=None, tol=DEFAULT_TOL) -> ContractionSample:
    x = sys.check_point(x)
    f = sys.guard(x)
    if M is None or LM is None:
        M0, Mp = metric_and_orbital(sys, metric, x[None, :], h=h, tol=tol)
        M = M0[0]
        LM = lm_values(sys.jacobian(x), f, M, Mp[0])
    L, v = reduced_contraction(f, LM, M)
    return ContractionSample(x=x, L_value=L, argmax_v=v,
                             min_eig_M=float(np.linalg.eigvalsh(M)[0]))


def brute_force_contraction(f, LM, M, n_dirs=100_000, rng=None, polish=True):
    """Oracle: maximise 1/2 v^T LM v over v^T f = 0, v^T M v = 1 without eigensolvers.

    Random directions give a starting point; ``polish`` then climbs the
    Rayleigh quotient with BFGS in the unconstrained parameter w, v = P w.
    """
    rng = np.random.default_rng(rng)
    f = np.asarray(f, dtype=float)
    P = np.eye(f.size) - np.outer(f, f) / (f @ f)
    V = rng.standard_normal((n_dirs, f.size)) @ P
    q = np.einsum("ki,ij,kj->k", V, M, V)
    V /= np.sqrt(q)[:, None]
    vals = 0.5 * np.einsum("ki,ij,kj->k", V, LM, V)
    k = int(np.argmax(vals))
    best, v = float(vals[k]), V[k]
    if polish:
        from scipy.optimize import minimize

        def neg(w):
            u = P @ w
            return -0.5 * (u @ LM @ u) / (u @ M @ u)

        res = minimize(neg, v, method="BFGS", options={"gtol": 1e-12})
        if -res.fun > best:
            u = P @ res.x
            best, v = float(-res.fun), u / np.sqrt(u @ M @ u)
    return best, v


# --------------------------------------------------------------- PDE residual

def pde_residuals(sys: SystemDef, metric: MetricField, B_field: BField, X, h=None,
                  tol=DEFAULT_TOL) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    LM = apply_L_many(sys, metric, X, h=h, tol=tol)
    return np.linalg.norm(LM + rhs_C_many(sys, B_field, X), axis=(-2, -1))


def pde_residual(sys: SystemDef, metric: MetricField, B_field: BField, x, h=None,
                 tol=DEFAULT_TOL) -> float:
    x = sys.check_point(x)
    return float(pde_residuals(sys, metric, B_field, x[None, :], h=h, tol=tol)[0])


# ------------------------------------------------------------------- regions

def annulus_sampler(r_in: float, r_out: float, center=(0.0, 0.0)) -> Callable:
    """Area-uniform samples of a planar annulus."""
    if not 0 <= r_in < r_out:
        raise ConfigError("annulus needs 0 <= r_in < r_out")
    c = np.asarray(center, dtype=float)

    def sample(n, rng):
        r = np.sqrt(rng.uniform(r_in ** 2, r_out ** 2, n))
        th = rng.uniform(0, 2 * np.pi, n)
        return c + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)

    sample.descriptor = {"type": "annulus", "r_in": r_in, "r_out": r_out, "center": c.tolist()}
    return sample


def tube_sampler(sys: SystemDef, orbit: PeriodicOrbitRecord, width: float) -> Callable:
    """Points p + s*u with p on the orbit, u a random unit vector normal to f(p), |s| <= width."""

    def sample(n, rng):
        idx = rng.integers(0, len(orbit.samples), n)
        P = orbit.samples[idx]
        F = sys.rhs(P)
        U = rng.standard_normal(P.shape)
        U -= F * (np.sum(U * F, axis=1) / np.sum(F * F, axis=1))[:, None]
        U /= np.linalg.norm(U, axis=1)[:, None]
        s = rng.uniform(-width, width, n)
        return P + s[:, None] * U

    sample.descriptor = {"type": "tube", "width": width, "period": orbit.period}
    return sample


def load_points(path) -> np.ndarray:
    """Point list: one point per line, whitespace-separated coordinates."""
    try:
        pts = np.loadtxt(Path(path), ndmin=2, comments="#")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read points from {path}: {exc}") from exc
    return pts


# ------------------------------------------------------------- certification

@dataclass
class CertificationReport:
    samples: list
    nu_certified: float
    floquet_nu: float
    verdict: dict
    set_descriptor: dict
    excluded: list = field(default_factory=list)
    eigen_ratio_bound: float = np.nan
    stats: CompactSetStats | None = None
    lipschitz_margin: float = np.nan
    max_residual: float = np.nan

    @property
    def passed(self):
        return all(self.verdict.values())


def _lipschitz_margin(X, L, nu):
    """nu minus (Lipschitz estimate of L_M) x (sample covering radius); evidence only."""
    if len(X) < 3:
        return np.nan
    tree = cKDTree(X)
    d, j = tree.query(X, k=min(4, len(X)))
    d, j = d[:, 1:], j[:, 1:]
    lip = np.max(np.abs(L[:, None] - L[j]) / np.maximum(d, 1e-300))
    return float(nu - lip * 0.5 * np.max(d[:, 0]))


def certify_region(sys: SystemDef, metric: MetricField, region, n_samples: int | None = None,
                   *, B_field: BField | None = None, orbit: PeriodicOrbitRecord | None = None,
                   seed: int = 0, residual_tol: float = 1e-3, floquet_tol: float = 1e-3,
                   h=None, tol=DEFAULT_TOL) -> CertificationReport:
    """Sample-based check of the contraction condition on a region.

    ``region`` is a sampler ``(n, rng) -> points`` or an explicit point array.
    """
    if callable(region):
        X = np.asarray(region(n_samples or 100, np.random.default_rng(seed)), dtype=float)
        descriptor = dict(getattr(region, "descriptor", {"type": "sampler"}), n=len(X), seed=seed)
    else:
        X = np.atleast_2d(np.asarray(region, dtype=float))
        descriptor = {"type": "points", "n": len(X)}
    sys.check_point(X)

    keep, excluded = [], []
    for x in X:
        try:
            sys.guard(x)
            keep.append(x)
        except EquilibriumError:
            log.warning("excluding %s: too close to an equilibrium", x)
            excluded.append({"x": x, "reason": "equilibrium"})
    if not keep:
        raise EmptyRegionError("all region samples were excluded")
    X = np.array(keep)

    if isinstance(metric, IntegralMetric):
        recs = metric.evaluate_many(X, raise_errors=False)
        good = np.array([r.ok for r in recs])
        for r in recs:
            if not r.ok:
                excluded.append({"x": r.x, "reason": r.status, "message": r.message})
        if not good.any():
            raise EmptyRegionError("metric could not be evaluated at any sample")
        failed_metric = not good.all()
        X = X[good]
    else:
        failed_metric = False

    f = sys.rhs(X)
    M, Mp = metric_and_orbital(sys, metric, X, h=h, tol=tol)
    LM = lm_values(sys.jacobian(X), f, M, Mp)
    res = (np.linalg.norm(LM + rhs_C_many(sys, B_field, X), axis=(-2, -1))
           if B_field is not None else np.full(len(X), np.nan))

    samples = []
    for i, x in enumerate(X):
        try:
            s = contraction_measure(sys, metric, x, LM=LM[i], M=M[i])
        except MetricDegenerateError:
            s = ContractionSample(x=x, L_value=np.inf, argmax_v=np.full(x.size, np.nan),
                                  min_eig_M=float(np.linalg.eigvalsh(M[i])[0]))
        s.residual_norm = float(res[i])
        samples.append(s)

    Ls = np.array([s.L_value for s in samples])
    nu = float(-np.max(Ls))
    eigM = np.linalg.eigvalsh(M)
    verdict = {
        "positive_definite": bool(np.all(eigM[:, 0] > 0)) and not failed_metric,
        "contraction": bool(nu > 0) and not failed_metric,
    }
    prop = np.nan
    stats = CompactSetStats(float(np.min(np.linalg.norm(f, axis=1))),
                            float(np.max(np.linalg.norm(f, axis=1))),
                            float(np.max(np.linalg.norm(sys.jacobian(X), ord=2, axis=(1, 2)))),
                            float(eigM[:, 0].min()), float(eigM[:, -1].max()))
    if B_field is not None:
        verdict["residual"] = bool(np.all(res <= residual_tol))
        stats.lambda_min_B = B_field.min_eig(X)
        stats.lambda_max_B = float(np.max(np.linalg.eigvalsh(B_field(X))))
        prop = stats.lambda_min_B / (2 * stats.lambda_max_M)
    floquet_nu = np.nan
    if orbit is not None:
        floquet_nu = orbit.nu
        # nontrivial Floquet real parts must be <= -nu
        verdict["floquet_consistent"] = bool(-floquet_nu <= -nu + floquet_tol)
    return CertificationReport(samples=samples, nu_certified=nu, floquet_nu=floquet_nu,
                               verdict=verdict, set_descriptor=descriptor, excluded=excluded,
                               eigen_ratio_bound=prop, stats=stats,
                               lipschitz_margin=_lipschitz_margin(X, Ls, nu),
                               max_residual=float(np.max(res)) if B_field is not None else np.nan)


# ----------------------------------------------------------------- decay fits

@dataclass
class DecayFit:
    rate: float
    prefactor: float
    residual_r2: float
    horizon: float
    envelope: float = np.nan
    n_used: int = 0
    sup_unprojected: float = np.nan
    times: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)

    def derived(self, nu: float) -> dict:
        """Quantities tied to the fitted rate when kappa = (nu - 2 eps)/(1 + eps)."""
        eps = (nu - self.rate) / (2 + self.rate)
        return {"eps": eps, "mu0": nu - eps, "rho0": nu - 2 * eps, "kappa0": self.rate / 2}


def _fit(ts, vs, horizon, warmup, floor, sup_unproj):
    kappa, c_ls, c_env, r2, cnt = fit_log_decay(ts, vs, floor=floor, warmup=warmup)
    if cnt < 10:
        raise NoDecayError(f"only {cnt} samples above the noise floor; shorten the horizon")
    if not kappa > 0:
        raise NoDecayError(f"projected solutions do not decay (fitted rate {kappa:.3g})")
    return DecayFit(rate=kappa, prefactor=c_ls, residual_r2=r2, horizon=horizon, envelope=c_env,
                    n_used=cnt, sup_unprojected=sup_unproj, times=ts, values=vs)


def _psi_fun(sys):
    n = sys.dimension

    def fun(Y):
        x = Y[:, :n]
        Psi = Y[:, n:].reshape(-1, n, n)
        f = sys.rhs(x)
        Df = sys.jacobian(x)
        ff = f[:, :, None] * f[:, None, :] / np.sum(f * f, axis=1)[:, None, None]
        At = Df - ff @ (np.swapaxes(Df, 1, 2) + Df)
        return np.concatenate([f, (At @ Psi).reshape(-1, n * n)], axis=1)

    return fun


def _var_fun(sys):
    n = sys.dimension

    def fun(Y):
        x = Y[:, :n]
        Phi = Y[:, n:].reshape(-1, n, n)
        return np.concatenate([sys.rhs(x), (sys.jacobian(x) @ Phi).reshape(-1, n * n)], axis=1)

    return fun


def _matrix_trajectory(sys, fun, x, times, tol):
    n = sys.dimension
    Y0 = np.concatenate([x, np.eye(n).ravel()])[None, :]
    sol = integrate.solve(fun, Y0, times, rtol=tol, atol=tol, bound=sys.bound,
                          bound_slice=slice(0, n))
    ys = sol.ys[:, 0, :]
    return ys[:, :n], ys[:, n:].reshape(-1, n, n)


def decay_fit(sys: SystemDef, x, horizon: float = 20.0, n_samples: int = 200,
              warmup: float | None = None, tol: float = DEFAULT_TOL) -> DecayFit:
    """Fit ||P_{S_t x} Phi(t,0;x)|| ~ C e^{-kappa t} on a uniform grid.

    Samples below ``1e4 * tol`` are integration noise and are dropped.
    """
    x = sys.check_point(x)
    sys.guard(x)
    ts = np.linspace(0, horizon, n_samples + 1)[1:]
    traj, Phi = _matrix_trajectory(sys, _var_fun(sys), x, ts, tol)
    vs = np.linalg.norm(projection_matrix(sys.rhs(traj)) @ Phi, ord=2, axis=(1, 2))
    sup = float(np.max(np.linalg.norm(Phi, ord=2, axis=(1, 2))))
    warm = 0.2 * horizon if warmup is None else warmup
    return _fit(ts, vs, horizon, warm, 1e4 * tol, sup)


@dataclass
class PsiDecayReport(DecayFit):
    init_decomposition_error: float = np.nan
    phi0_tracking_error: float = np.nan


def psi_decay_check(sys: SystemDef, x, horizon: float = 20.0, n_samples: int = 200,
                    warmup: float | None = None, tol: float = DEFAULT_TOL) -> PsiDecayReport:
    """Decay of ||P_{S_t x} Psi(t,x)|| where Psi' = (Df - f f^T (Df^T + Df)/|f|^2) Psi.

    Also reports how exactly Psi(0) = f f^T/|f|^2 + P_x reproduces I and
    how well Psi carries f(x)/|f(x)|^2 onto f(S_t x)/|f(S_t x)|^2.
    """
    x = sys.check_point(x)
    f0 = sys.guard(x)
    ts = np.linspace(0, horizon, n_samples + 1)[1:]
    traj, Psi = _matrix_trajectory(sys, _psi_fun(sys), x, ts, tol)
    F = sys.rhs(traj)
    vs = np.linalg.norm(projection_matrix(F) @ Psi, ord=2, axis=(1, 2))
    warm = 0.2 * horizon if warmup is None else warmup
    base = _fit(ts, vs, horizon, warm, 1e4 * tol,
                float(np.max(np.linalg.norm(Psi, ord=2, axis=(1, 2)))))
    decomp = np.outer(f0, f0) / (f0 @ f0) + projection_matrix(f0)
    phi0 = F / np.sum(F * F, axis=1)[:, None]
    carried = Psi @ (f0 / (f0 @ f0))
    track = np.max(np.linalg.norm(carried - phi0, axis=1) / np.linalg.norm(phi0, axis=1))
    return PsiDecayReport(**base.__dict__,
                          init_decomposition_error=float(np.max(np.abs(decomp - np.eye(x.size)))),
                          phi0_tracking_error=float(track))


# ------------------------------------------------------------ conservation

@dataclass
class ConservationReport:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    max_identity_error: float
    phi0_values: np.ndarray
    max_phi0_deviation: float


def conservation_checks(sys: SystemDef, metric: MetricField, x, t_grid, *, phi1=None, phi2=None,
                        c0: float | None = None, seed: int = 0, h: float = 1e-3,
                        tol: float = DEFAULT_TOL) -> ConservationReport:
    """Check d/dt[phi1^T P M P phi2] = phi1^T P (LM) P phi2 along S_t x by
    Richardson finite differences, and evaluate phi0^T M phi0 with
    phi0 = f(S_t x)/|f(S_t x)|^2 (constant, equal to c0, for the
    constructed metric)."""
    x = sys.check_point(x)
    sys.guard(x)
    n = x.size
    rng = np.random.default_rng(seed)
    phi1 = rng.standard_normal(n) if phi1 is None else np.asarray(phi1, dtype=float)
    phi2 = rng.standard_normal(n) if phi2 is None else np.asarray(phi2, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    offs = np.array([0.0, h, -h, h / 2, -h / 2])
    all_t = (t_grid[:, None] + offs).ravel()

    # forward and backward rows share the start x, Phi = I
    fwd = np.sort(np.unique(all_t[all_t > 0]))
    bwd = np.sort(np.unique(all_t[all_t < 0]))[::-1]
    table = {0.0: (x, np.eye(n))}
    for ts in (fwd, bwd):
        if ts.size:
            traj, Phi = _matrix_trajectory(sys, _var_fun(sys), x, ts, tol)
            table.update({float(t): (traj[i], Phi[i]) for i, t in enumerate(ts)})
    pts = np.array([table[float(t)][0] for t in all_t])
    Phis = np.array([table[float(t)][1] for t in all_t])

    M = metric.eval_many(pts)
    P = projection_matrix(sys.rhs(pts))
    u = np.einsum("kij,kj->ki", P, Phis @ phi1)
    w = np.einsum("kij,kj->ki", P, Phis @ phi2)
    g = np.einsum("ki,kij,kj->k", u, M, w).reshape(len(t_grid), 5)
    d_h = (g[:, 1] - g[:, 2]) / (2 * h)
    d_h2 = (g[:, 3] - g[:, 4]) / h
    lhs = (4 * d_h2 - d_h) / 3

    base = pts.reshape(len(t_grid), 5, n)[:, 0]
    LM = apply_L_many(sys, metric, base, tol=tol)
    u0 = u.reshape(len(t_grid), 5, n)[:, 0]
    w0 = w.reshape(len(t_grid), 5, n)[:, 0]
    rhs = np.einsum("ki,kij,kj->k", u0, LM, w0)

    F = sys.rhs(base)
    phi0 = F / np.sum(F * F, axis=1)[:, None]
    M0 = M.reshape(len(t_grid), 5, n, n)[:, 0]
    vals = np.einsum("ki,kij,kj->k", phi0, M0, phi0)
    ref = vals[0] if c0 is None else c0
    return ConservationReport(times=t_grid, lhs=lhs, rhs=rhs,
                              max_identity_error=float(np.max(np.abs(lhs - rhs))),
                              phi0_values=vals, max_phi0_deviation=float(np.max(np.abs(vals - ref))))


# --------------------------------------------------------------- uniqueness

def uniqueness_convergence(sys: SystemDef, B_field, c0, x0, x, cfg_a: QuadratureConfig,
                           cfg_b: QuadratureConfig, return_bounds: bool = False):
    """Spectral-norm distance between two independent constructions at x."""
    sa = IntegralMetric(sys, B_field, c0, x0, cfg_a).evaluate(x)
    sb = IntegralMetric(sys, B_field, c0, x0, cfg_b).evaluate(x)
    d = float(np.linalg.norm(sa.M - sb.M, 2))
    if return_bounds:
        return d, sa.error_bound, sb.error_bound
    return d


# ----------------------------------------------------------------- Gronwall

class GronwallResult(NamedTuple):
    holds: bool
    max_violation: float


def gronwall_check(theta, r, a, K, b, rtol: float = 1e-9) -> GronwallResult:
    """Check r <= a + K * int_0^theta a b ds * exp(int_0^theta K b ds) on samples.

    The hypothesis r <= a + K * int_0^theta b r ds is verified first
    (trapezoid quadrature, relative slack ``rtol``); if it fails no
    conclusion is drawn and :class:`HypothesisViolated` is raised.
    """
    theta = np.asarray(theta, dtype=float)
    r, a, K, b = (np.broadcast_to(np.asarray(v, dtype=float), theta.shape) for v in (r, a, K, b))
    if np.any(np.diff(theta) <= 0) or theta[0] != 0:
        raise ConfigError("theta grid must start at 0 and increase")
    for name, v in (("r", r), ("a", a), ("K", K), ("b", b)):
        if np.any(v < 0):
            raise ConfigError(f"{name} must be nonnegative")
    hyp = a + K * cumulative_trapezoid(b * r, theta, initial=0.0)
    slack = rtol * np.maximum(1.0, np.abs(hyp))
    if np.any(r > hyp + slack):
        worst = float(np.max(r - hyp))
        raise HypothesisViolated(f"hypothesis fails by up to {worst:.3g}")
    bound = a + K * cumulative_trapezoid(a * b, theta, initial=0.0) * np.exp(
        cumulative_trapezoid(K * b, theta, initial=0.0))
    viol = r - bound
    return GronwallResult(bool(np.all(viol <= rtol * np.maximum(1.0, np.abs(bound)))),
                          float(np.max(viol)))


# ---------------------------------------------------------- synchronisation

@dataclass
class SyncExperiment:
    p: np.ndarray
    eta: np.ndarray
    theta_grid: np.ndarray
    A_series: np.ndarray
    T_series: np.ndarray
    q_residuals: np.ndarray
    fitted_rate: float
    k_margin: float
    nu: float
    target_rate: float
    contraction_violated: bool = False

    @property
    def T_dot(self):
        return np.gradient(self.T_series, self.theta_grid)


def sync_contraction_experiment(sys: SystemDef, metric: MetricField, orbit: PeriodicOrbitRecord,
                                eta_mag: float = 1e-3, theta_max: float = 3.0, k: float = 0.1,
                                n_theta: int = 61, nu: float | None = None, direction=None,
                                tol: float = 1e-12, q_tol: float = 1e-14,
                                max_newton: int = 30) -> SyncExperiment:
    """Track the synchronised distance A(theta) between S_theta p and S_T(p+eta).

    T(theta) solves (S_T(p+eta) - S_theta p)^T f(S_theta p) = 0 by safeguarded
    Newton from the previous T; the decay rate of A^2 is then fitted and
    compared with 2(1-k)nu.
    """
    if not 0 < k < 1:
        raise ConfigError("k must lie in (0, 1)")
    p = np.asarray(orbit.anchor, dtype=float)
    fp = sys.guard(p)
    if direction is None:
        u = perp_basis(fp)[:, 0]
    else:
        u = np.asarray(direction, dtype=float)
        u = u - fp * (u @ fp) / (fp @ fp)
        u /= np.linalg.norm(u)
    eta = eta_mag * u
    nu = orbit.nu if nu is None else nu
    thetas = np.linspace(0.0, theta_max, n_theta)

    base = [p]
    for j in range(1, n_theta):
        base.append(flow(sys, base[-1], thetas[j] - thetas[j - 1], tol=tol).endpoint)
    base = np.array(base)
    Ms = metric.eval_many(base)
    F = sys.rhs(base)

    y, Tc = p + eta, 0.0
    Ts, As, Qs = [], [], []
    for j, th in enumerate(thetas):
        T = Tc if j == 0 else Tc + (thetas[j] - thetas[j - 1])
        max_step = 0.5 * (thetas[1] - thetas[0]) if n_theta > 1 else 0.5
        for _ in range(max_newton):
            yT = flow(sys, y, T - Tc, tol=tol).endpoint if T != Tc else y
            Q = (yT - base[j]) @ F[j]
            if abs(Q) <= q_tol * max(1.0, F[j] @ F[j]):
                break
            dQ = sys.rhs(yT) @ F[j]
            if dQ <= 0:
                raise PerturbationTooLarge(f"dQ/dT = {dQ:.3g} <= 0 at theta={th:.4g}")
            step = float(np.clip(-Q / dQ, -max_step, max_step))
            if step == 0.0:
                break
            T += step
        else:
            raise PerturbationTooLarge(f"synchronisation root solve failed at theta={th:.4g}")
        y, Tc = yT, T
        d = yT - base[j]
        Ts.append(T)
        Qs.append(abs(Q))
        As.append(np.sqrt(max(d @ Ms[j] @ d, 0.0)))

    A = np.array(As)
    with np.errstate(divide="ignore"):
        ok = A > 0
        rate = float(-np.polyfit(thetas[ok], np.log(A[ok] ** 2), 1)[0]) if ok.sum() >= 2 else np.nan
    violated = bool(ok.sum() >= 2 and not rate > 0)
    return SyncExperiment(p=p, eta=eta, theta_grid=thetas, A_series=A, T_series=np.array(Ts),
                          q_residuals=np.array(Qs), fitted_rate=rate, k_margin=k, nu=nu,
                          target_rate=2 * (1 - k) * nu, contraction_violated=violated)

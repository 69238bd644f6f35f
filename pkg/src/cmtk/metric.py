"""Contraction metric as a truncated integral along trajectories.

    M(x) = int_0^inf Phi(t,0;x)^T C(S_t x) Phi(t,0;x) dt + c0 f(x) f(x)^T,
    C(x) = P_x^T B(x) P_x.

The integral is carried as an extra n x n block of the ODE state next to the
trajectory and the fundamental matrix, so one adaptive solve per point
produces M_1(x).  The horizon is doubled until the fitted exponential tail
of the integrand is below ``rel_tail_tol`` relative to the accumulated value.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import integrate
from .errors import CmtkError, ConfigError, EquilibriumError, NoDecayError
from .projection import MetricField, projection_matrix
from .systems import DEFAULT_TOL, PolynomialField, SystemDef, flow_batch

CACHE_DIGITS = 12


@dataclass(frozen=True)
class QuadratureConfig:
    t_max: float = 10.0
    rel_tail_tol: float = 1e-8
    step_ctrl: float = DEFAULT_TOL
    decay_rate_hint: float | None = None
    samples_per_horizon: int = 64
    warmup_frac: float = 0.2
    max_doublings: int = 6
    noise_floor: float | None = None  # default 1e4 * step_ctrl

    def __post_init__(self):
        if not self.t_max > 0:
            raise ConfigError("t_max must be positive")
        if not 0 < self.rel_tail_tol < 1:
            raise ConfigError("rel_tail_tol must lie in (0, 1)")
        if not self.step_ctrl > 0:
            raise ConfigError("step_ctrl must be positive")

    @property
    def floor(self):
        return self.noise_floor if self.noise_floor is not None else 1e4 * self.step_ctrl


class BField:
    """Symmetric positive definite weight B(x).

    Use :meth:`identity`, :meth:`constant` or :meth:`polynomial`.
    """

    def __init__(self, n, func, const=None, description="custom"):
        self.n = n
        self.func = func
        self.const = const
        self.description = description

    @classmethod
    def identity(cls, n):
        return cls.constant(np.eye(n), description="identity")

    @classmethod
    def constant(cls, B, description=None):
        B = np.asarray(B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ConfigError("B must be a square matrix")
        _check_spd(B[None])
        n = B.shape[0]
        return cls(n, lambda X: np.broadcast_to(B, X.shape[:-1] + (n, n)), const=B,
                   description=description or "constant")

    @classmethod
    def polynomial(cls, n, terms):
        """Entries from an n*n-component polynomial field, row-major."""
        field_ = PolynomialField(n, terms)
        if len(field_.terms) != n * n:
            raise ConfigError(f"polynomial B needs {n * n} entry blocks, got {len(field_.terms)}")
        return cls(n, lambda X: field_(X).reshape(X.shape[:-1] + (n, n)),
                   description="polynomial")

    def __call__(self, X):
        return np.asarray(self.func(np.asarray(X, dtype=float)), dtype=float)

    def validated(self, X):
        B = self(X)
        _check_spd(B.reshape((-1, self.n, self.n)))
        return B

    def sup_norm(self, X=None):
        if self.const is not None:
            return float(np.linalg.norm(self.const, 2))
        return float(np.max(np.linalg.norm(self(X), ord=2, axis=(-2, -1))))

    def min_eig(self, X):
        if self.const is not None:
            return float(np.linalg.eigvalsh(self.const).min())
        return float(np.min(np.linalg.eigvalsh(self(X))))


def _check_spd(B):
    if not np.allclose(B, np.swapaxes(B, -1, -2), rtol=0, atol=1e-12 * max(1.0, np.abs(B).max())):
        raise ConfigError("B is not symmetric")
    if np.any(np.linalg.eigvalsh(B)[..., 0] <= 0):
        raise ConfigError("B is not positive definite")


def rhs_C(sys: SystemDef, B_field: BField, x) -> np.ndarray:
    """P_x^T B(x) P_x."""
    x = sys.check_point(x)
    f = sys.guard(x)
    P = projection_matrix(f)
    B = B_field.validated(x)
    C = P.T @ B @ P
    return 0.5 * (C + C.T)


def rhs_C_many(sys: SystemDef, B_field: BField, X) -> np.ndarray:
    X = np.atleast_2d(X)
    P = projection_matrix(sys.guard(X))
    C = np.swapaxes(P, -1, -2) @ B_field.validated(X) @ P
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def tail_bound(decay_fit, t_max: float, B_sup: float) -> float:
    """Bound on the discarded tail ``int_{t_max}^inf`` in spectral norm.

    With ``||P Phi(t)|| <= C e^{-kappa t}`` the integrand is bounded by
    ``B_sup C^2 e^{-2 kappa t}``.  ``decay_fit`` is ``(C, kappa)`` or any
    object with ``prefactor`` and ``rate`` attributes.
    """
    if hasattr(decay_fit, "rate"):
        C, kappa = decay_fit.prefactor, decay_fit.rate
    else:
        C, kappa = decay_fit
    if not kappa > 0:
        raise NoDecayError(f"decay rate {kappa} is not positive")
    return C * C * B_sup / (2 * kappa) * np.exp(-2 * kappa * t_max)


def fit_log_decay(ts, vs, floor=0.0, warmup=0.0, min_samples=10):
    """Least-squares fit of ``log v = log C - kappa t``.

    Uses samples with ``t >= warmup`` and ``v > floor``; returns
    ``(kappa, C_ls, C_env, r2, count)`` where ``C_env`` is the smallest
    prefactor that bounds every fitted sample.
    """
    ts = np.asarray(ts, dtype=float)
    vs = np.asarray(vs, dtype=float)
    ok = (ts >= warmup) & (vs > floor)
    if ok.sum() < min_samples:
        ok = vs > floor
    if ok.sum() < 2:
        return np.nan, np.nan, np.nan, np.nan, int(ok.sum())
    t, lv = ts[ok], np.log(vs[ok])
    slope, icpt = np.polyfit(t, lv, 1)
    pred = icpt + slope * t
    ss_tot = np.sum((lv - lv.mean()) ** 2)
    r2 = 1.0 - np.sum((lv - pred) ** 2) / ss_tot if ss_tot > 0 else 1.0
    kappa = -slope
    c_env = float(np.exp(np.max(lv + kappa * t)))
    return float(kappa), float(np.exp(icpt)), c_env, float(r2), int(ok.sum())


@dataclass
class MetricSample:
    x: np.ndarray
    M: np.ndarray | None = None
    M1: np.ndarray | None = None
    tail_bound: float = np.nan
    quad_error: float = np.nan
    horizon: float = np.nan
    rate: float = np.nan
    prefactor: float = np.nan
    B_sup: float = np.nan
    status: str = "ok"
    message: str = ""
    error: CmtkError | None = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == "ok"

    @property
    def error_bound(self):
        return self.tail_bound + self.quad_error


def _metric_fun(sys: SystemDef, B_field: BField):
    n = sys.dimension
    nn = n * n

    def fun(Y):
        x = Y[:, :n]
        Phi = Y[:, n:n + nn].reshape(-1, n, n)
        f = sys.rhs(x)
        G = Phi - f[:, :, None] * (np.einsum("ki,kij->kj", f, Phi) / np.sum(f * f, axis=1)[:, None])[:, None, :]
        I = np.swapaxes(G, 1, 2) @ B_field(x) @ G
        I = 0.5 * (I + np.swapaxes(I, 1, 2))
        return np.concatenate([f, (sys.jacobian(x) @ Phi).reshape(-1, nn), I.reshape(-1, nn)], axis=1)

    return fun


class IntegralMetric(MetricField):
    """Evaluator for the integral metric with a per-point result cache."""

    kind = "integral"

    def __init__(self, sys: SystemDef, B_field: BField | None = None, c0: float = 1.0,
                 x0=None, config: QuadratureConfig | None = None, jobs: int = 1):
        if not c0 > 0:
            raise ConfigError("c0 must be positive")
        self.sys = sys
        self.B = B_field if B_field is not None else BField.identity(sys.dimension)
        if self.B.n != sys.dimension:
            raise ConfigError("B dimension does not match the system")
        self.c0 = float(c0)
        self.x0 = None if x0 is None else sys.check_point(x0)
        self.config = config or QuadratureConfig()
        self.tol = self.config.step_ctrl
        self.jobs = max(1, int(jobs))
        self._cache: dict[tuple, MetricSample] = {}
        self._lock = threading.Lock()

    # -- caching ---------------------------------------------------------
    @staticmethod
    def _key(x):
        return tuple(np.round(np.asarray(x, dtype=float), CACHE_DIGITS).tolist())

    def cached(self, x):
        return self._cache.get(self._key(x))

    # -- evaluation ------------------------------------------------------
    def evaluate_many(self, X, raise_errors=True) -> list[MetricSample]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.sys.check_point(X)
        keys = [self._key(x) for x in X]
        todo = {}
        for k, x in zip(keys, X):
            if k not in self._cache and k not in todo:
                todo[k] = x
        if todo:
            pts = np.array(list(todo.values()))
            if self.jobs > 1 and len(pts) > 1:
                chunks = np.array_split(np.arange(len(pts)), min(self.jobs, len(pts)))
                with ThreadPoolExecutor(self.jobs) as ex:
                    parts = list(ex.map(lambda idx: self._compute(pts[idx]), chunks))
                results = [s for part in parts for s in part]
            else:
                results = self._compute(pts)
            with self._lock:
                for k, s in zip(todo, results):
                    self._cache[k] = s
        out = [self._cache[k] for k in keys]
        if raise_errors:
            for s in out:
                if not s.ok:
                    raise s.error
        return out

    def evaluate(self, x) -> MetricSample:
        return self.evaluate_many(np.asarray(x, dtype=float)[None, :])[0]

    def eval_many(self, X):
        return np.array([s.M for s in self.evaluate_many(X)])

    def normalization(self, x) -> float:
        """f^T M f / |f|^4, which equals c0 for the exact metric."""
        s = self.evaluate(x)
        f = self.sys.rhs(s.x)
        return float(f @ s.M @ f / (f @ f) ** 2)

    def orbital_many(self, X, h=None):
        """Richardson central difference of t -> M(S_t x) at t=0.

        The four stencil points of each x are integrated in lockstep (one
        shared step sequence), so the difference quotient does not pick up
        step-selection jitter.  Stencil evaluations are not cached.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        N, n = X.shape
        h = 1e-3 * self.sys.char_time if h is None else h
        shifts = np.array([h, -h, h / 2, -h / 2])
        pts = np.repeat(X, 4, axis=0)
        moved = flow_batch(self.sys, pts, np.tile(shifts, N)[None, :], tol=self.tol).ys[-1]
        recs = self._compute(moved, groups=np.repeat(np.arange(N), 4))
        for r in recs:
            if not r.ok:
                raise r.error
        Ms = np.array([r.M for r in recs]).reshape(N, 4, n, n)
        d_h = (Ms[:, 0] - Ms[:, 1]) / (2 * h)
        d_h2 = (Ms[:, 2] - Ms[:, 3]) / h
        val = (4 * d_h2 - d_h) / 3
        return 0.5 * (val + np.swapaxes(val, -1, -2))

    def _compute(self, X, groups=None) -> list[MetricSample]:
        """Evaluate rows of X; rows sharing a ``groups`` label are integrated
        in lockstep and extend their horizon together."""
        sys, cfg = self.sys, self.config
        n = sys.dimension
        nn = n * n
        N = len(X)
        samples = [MetricSample(x=x.copy()) for x in X]

        f0 = sys.rhs(X)
        live = np.ones(N, dtype=bool)
        for i in range(N):
            try:
                sys.guard(X[i], f0[i])
                self.B.validated(X[i])
            except (EquilibriumError, ConfigError) as exc:
                self._fail(samples[i], exc)
                live[i] = False

        Y = np.concatenate([X, np.broadcast_to(np.eye(n).ravel(), (N, nn)), np.zeros((N, nn))],
                           axis=1)
        ts = [np.zeros(1) for _ in range(N)]
        vs = [np.ones(1) for _ in range(N)]
        bsup = np.array([self.B.sup_norm(X[i:i + 1]) if live[i] else np.nan for i in range(N)])
        err_sum = np.zeros(N)
        t_now = 0.0
        horizon = cfg.t_max
        fun = _metric_fun(sys, self.B)
        pending = live.copy()

        for doubling in range(cfg.max_doublings + 1):
            rows = np.nonzero(pending)[0]
            if rows.size == 0:
                break
            k = cfg.samples_per_horizon if doubling == 0 else cfg.samples_per_horizon // 2
            grid = np.linspace(t_now, horizon, k + 1)[1:]
            g_rows = None if groups is None else np.unique(groups[rows], return_inverse=True)[1]
            try:
                sol = integrate.solve(fun, Y[rows], grid - t_now, rtol=cfg.step_ctrl,
                                      atol=cfg.step_ctrl, bound=sys.bound,
                                      bound_slice=slice(0, n), groups=g_rows)
            except CmtkError as exc:
                if len(rows) == 1:
                    self._fail(samples[rows[0]], exc)
                    pending[rows] = False
                    break
                # isolate the failing rows (or groups) by solving them separately
                sol = None
                units = ([[r] for r in rows] if groups is None else
                         [rows[groups[rows] == g] for g in np.unique(groups[rows])])
                for unit in units:
                    sub = self._compute_segment(fun, Y[unit], grid - t_now, len(unit) > 1)
                    if isinstance(sub, CmtkError):
                        for r in unit:
                            self._fail(samples[r], sub)
                            pending[r] = False
                    else:
                        for j, r in enumerate(unit):
                            self._absorb(r, _row(sub, j), grid, Y, ts, vs, bsup, err_sum)
            if sol is not None:
                for j, r in enumerate(rows):
                    self._absorb(r, _row(sol, j), grid, Y, ts, vs, bsup, err_sum)

            for r in np.nonzero(pending)[0]:
                s = samples[r]
                kappa, _, c_env, _, cnt = fit_log_decay(
                    ts[r], vs[r], floor=cfg.floor, warmup=cfg.warmup_frac * horizon)
                if not np.isfinite(kappa):
                    kappa, c_env = self._steep_fallback(ts[r], vs[r], cfg.floor)
                if cfg.decay_rate_hint is not None and not kappa > 0:
                    kappa = cfg.decay_rate_hint
                if not kappa > 0:
                    self._fail(s, NoDecayError(
                        f"projected variational solution does not decay from {s.x} "
                        f"(fitted rate {kappa:.3g}); point not in a basin of attraction?"))
                    pending[r] = False
                    continue
                J = Y[r, n + nn:].reshape(n, n)
                tb = tail_bound((c_env, kappa), horizon, bsup[r])
                s.tail_bound, s.rate, s.prefactor, s.horizon = float(tb), kappa, c_env, horizon
                if tb <= cfg.rel_tail_tol * max(np.linalg.norm(J, 2), 1e-300):
                    pending[r] = False
            if groups is not None:
                # a group stops only when every live member has converged
                alive = np.array([s.status == "ok" for s in samples])
                for g in np.unique(groups):
                    mem = groups == g
                    if not alive[mem].all():
                        for r in np.nonzero(mem & alive)[0]:
                            self._fail(samples[r], CmtkError("another point of the stencil failed"))
                        pending[mem] = False
                    elif pending[mem].any():
                        pending[mem] = True
            t_now = horizon
            horizon *= 2

        for r in range(N):
            s = samples[r]
            if s.status != "ok":
                continue
            if pending[r]:
                self._fail(s, NoDecayError(
                    f"tail bound {s.tail_bound:.3g} did not reach rel_tail_tol after "
                    f"{cfg.max_doublings} horizon doublings at {s.x}"))
                continue
            M1 = Y[r, n + nn:].reshape(n, n).copy()
            f = f0[r]
            s.M1 = M1
            s.M = M1 + self.c0 * np.outer(f, f)
            s.quad_error = float(err_sum[r])
            s.B_sup = float(bsup[r])
        return samples

    @staticmethod
    def _fail(sample, exc):
        sample.status = type(exc).__name__
        sample.message = str(exc)
        sample.error = exc

    @staticmethod
    def _steep_fallback(ts, vs, floor):
        ts, vs = np.asarray(ts), np.asarray(vs)
        below = np.nonzero(vs <= floor)[0]
        if below.size == 0 or ts[below[0]] <= 0:
            return np.nan, np.nan
        t1 = ts[below[0]]
        return float(np.log(max(vs[0], floor) / floor) / t1), float(max(vs[0], 1.0))

    def _compute_segment(self, fun, Y, times, lockstep):
        cfg = self.config
        try:
            return integrate.solve(fun, Y, times, rtol=cfg.step_ctrl, atol=cfg.step_ctrl,
                                   bound=self.sys.bound, bound_slice=slice(0, self.sys.dimension),
                                   groups=np.zeros(len(Y), dtype=int) if lockstep else None)
        except CmtkError as exc:
            return exc

    def _absorb(self, r, row, grid, Y, ts, vs, bsup, err_sum):
        n = self.sys.dimension
        nn = n * n
        ys, es = row
        x = ys[:, :n]
        Phi = ys[:, n:n + nn].reshape(-1, n, n)
        G = projection_matrix(self.sys.rhs(x)) @ Phi
        ts[r] = np.concatenate([ts[r], grid])
        vs[r] = np.concatenate([vs[r], np.linalg.norm(G, ord=2, axis=(1, 2))])
        if self.B.const is None:
            bsup[r] = max(bsup[r], self.B.sup_norm(x))
        err_sum[r] += es
        Y[r] = ys[-1]


def _row(sol, j):
    return sol.ys[:, j, :], float(sol.err_sum[j])


def build_metric(sys: SystemDef, B_field: BField | None = None, c0: float = 1.0, x0=None,
                 config: QuadratureConfig | None = None, jobs: int = 1) -> IntegralMetric:
    return IntegralMetric(sys, B_field, c0, x0, config, jobs=jobs)

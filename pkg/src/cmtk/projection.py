"""Projection onto the flow-normal hyperplane, the operator LM and metric fields."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import EquilibriumError
from .systems import DEFAULT_FMIN, DEFAULT_TOL, SystemDef, flow_batch


@dataclass(frozen=True)
class Projector:
    matrix: np.ndarray
    base_f: np.ndarray


def _guard_f(f_x, x=None, threshold=DEFAULT_FMIN):
    f_x = np.asarray(f_x, dtype=float)
    xn = 0.0 if x is None else np.linalg.norm(x, axis=-1)
    nf = np.linalg.norm(f_x, axis=-1)
    if np.any(nf <= threshold * (1 + xn)):
        raise EquilibriumError("vector field too small: point is near an equilibrium")
    return f_x, nf


def projection_matrix(f_x):
    """Batched ``I - f f^T / |f|^2`` without the equilibrium guard."""
    f_x = np.asarray(f_x, dtype=float)
    n = f_x.shape[-1]
    ff = f_x[..., :, None] * f_x[..., None, :]
    return np.eye(n) - ff / np.sum(f_x * f_x, axis=-1)[..., None, None]


def projection(f_x, x=None, threshold: float = DEFAULT_FMIN) -> Projector:
    f_x, _ = _guard_f(f_x, x, threshold)
    return Projector(matrix=projection_matrix(f_x), base_f=f_x)


def perp_basis(f_x, x=None, threshold: float = DEFAULT_FMIN) -> np.ndarray:
    """Orthonormal basis of the hyperplane perpendicular to ``f_x``.

    Householder reflection sending f/|f| to a multiple of e_1; columns
    2..n of the reflector are returned as an (n, n-1) matrix.
    """
    f_x, nf = _guard_f(f_x, x, threshold)
    u = f_x / nf
    n = u.size
    w = u.copy()
    w[0] += 1.0 if u[0] >= 0 else -1.0
    H = np.eye(n) - 2.0 * np.outer(w, w) / (w @ w)
    return H[:, 1:]


# ------------------------------------------------------------------ metrics

class MetricField:
    """Symmetric-matrix field x -> M(x) with optional orbital derivative.

    Subclasses implement ``eval_many``; ``orbital_many`` returns ``None``
    when no analytic orbital derivative is known, in which case callers fall
    back to :func:`orbital_derivative`.
    """

    kind = "analytic"
    tol = 1e-6

    def eval_many(self, X) -> np.ndarray:
        raise NotImplementedError

    def orbital_many(self, X):
        return None

    def eval(self, x) -> np.ndarray:
        return self.eval_many(np.asarray(x, dtype=float)[None, :])[0]

    def orbital_eval(self, x):
        out = self.orbital_many(np.asarray(x, dtype=float)[None, :])
        return None if out is None else out[0]


class AnalyticMetric(MetricField):
    def __init__(self, func: Callable, orbital: Callable | None = None, kind="analytic",
                 tol=1e-6):
        self.func = func
        self.orbital = orbital
        self.kind = kind
        self.tol = tol

    def eval_many(self, X):
        return np.asarray(self.func(np.asarray(X, dtype=float)), dtype=float)

    def orbital_many(self, X):
        if self.orbital is None:
            return None
        return np.asarray(self.orbital(np.asarray(X, dtype=float)), dtype=float)

    def __add__(self, other):
        return combine(1.0, self, 1.0, other)

    def __rmul__(self, a):
        return combine(a, self, 0.0, self)


def combine(a, m1: MetricField, b, m2: MetricField) -> AnalyticMetric:
    """The field a*M1 + b*M2; analytic orbital derivative only if both have one."""

    def func(X):
        return a * m1.eval_many(X) + b * m2.eval_many(X)

    out = AnalyticMetric(func, None, kind="analytic")

    def orbital_many(X):
        o1, o2 = m1.orbital_many(X), m2.orbital_many(X)
        if o1 is None or o2 is None:
            return None
        return a * o1 + b * o2

    out.orbital_many = orbital_many
    return out


def constant_metric(M) -> AnalyticMetric:
    M = np.asarray(M, dtype=float)

    def func(X):
        return np.broadcast_to(M, X.shape[:-1] + M.shape).copy()

    def orb(X):
        return np.zeros(X.shape[:-1] + M.shape)

    return AnalyticMetric(func, orb, kind="analytic")


def rank_one_metric(sys: SystemDef, c0: float = 1.0) -> AnalyticMetric:
    """c0 f f^T with its analytic orbital derivative c0 (Df f f^T + f f^T Df^T)."""
    if not c0 > 0:
        raise ValueError("c0 must be positive")

    def func(X):
        f = sys.rhs(X)
        return c0 * f[..., :, None] * f[..., None, :]

    def orb(X):
        f = sys.rhs(X)
        g = np.einsum("...ij,...j->...i", sys.jacobian(X), f)
        G = g[..., :, None] * f[..., None, :]
        return c0 * (G + np.swapaxes(G, -1, -2))

    return AnalyticMetric(func, orb, kind="rank-one")


# ------------------------------------------------------- operator and derivatives

def lm_raw(Df, f, M, Mp):
    """Unsymmetrised LM from pointwise values (batched over leading axes)."""
    S = Df + np.swapaxes(Df, -1, -2)
    ff = f[..., :, None] * f[..., None, :]
    nf2 = np.sum(f * f, axis=-1)[..., None, None]
    return (Mp + np.swapaxes(Df, -1, -2) @ M + M @ Df
            - (M @ ff @ S) / nf2 - (S @ ff @ M) / nf2)


def lm_values(Df, f, M, Mp):
    R = lm_raw(Df, f, M, Mp)
    return 0.5 * (R + np.swapaxes(R, -1, -2))


class FDResult(NamedTuple):
    value: np.ndarray
    error: np.ndarray


def orbital_derivative_many(sys: SystemDef, metric: MetricField, X, h=None,
                            tol: float = DEFAULT_TOL) -> FDResult:
    """Richardson-extrapolated central difference of t -> M(S_t x) at t=0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, n = X.shape
    if h is None:
        h = 1e-3 * sys.char_time
    shifts = np.array([h, -h, h / 2, -h / 2])
    pts = np.repeat(X, 4, axis=0)
    times = np.tile(shifts, N)[None, :]
    moved = flow_batch(sys, pts, times, tol=tol).ys[-1]
    Ms = metric.eval_many(moved).reshape(N, 4, n, n)
    d_h = (Ms[:, 0] - Ms[:, 1]) / (2 * h)
    d_h2 = (Ms[:, 2] - Ms[:, 3]) / h
    val = (4 * d_h2 - d_h) / 3
    val = 0.5 * (val + np.swapaxes(val, -1, -2))
    err = np.linalg.norm(val - d_h2, axis=(-2, -1))
    return FDResult(val, err)


def orbital_derivative(sys: SystemDef, metric: MetricField, x, h=None,
                       tol: float = DEFAULT_TOL) -> FDResult:
    x = sys.check_point(x)
    r = orbital_derivative_many(sys, metric, x[None, :], h=h, tol=tol)
    return FDResult(r.value[0], r.error[0])


def metric_and_orbital(sys: SystemDef, metric: MetricField, X, h=None, tol=DEFAULT_TOL):
    """M(X) and M'(X), the latter analytic when available else by flow FD."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    M = metric.eval_many(X)
    Mp = metric.orbital_many(X)
    if Mp is None:
        Mp = orbital_derivative_many(sys, metric, X, h=h, tol=tol).value
    return M, Mp


def apply_L_many(sys: SystemDef, metric: MetricField, X, h=None, tol=DEFAULT_TOL,
                 return_raw=False):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    f = sys.guard(X)
    M, Mp = metric_and_orbital(sys, metric, X, h=h, tol=tol)
    R = lm_raw(sys.jacobian(X), f, M, Mp)
    L = 0.5 * (R + np.swapaxes(R, -1, -2))
    return (L, R) if return_raw else L


def apply_L(sys: SystemDef, metric: MetricField, x, h=None, tol=DEFAULT_TOL) -> np.ndarray:
    x = sys.check_point(x)
    return apply_L_many(sys, metric, x[None, :], h=h, tol=tol)[0]

"""ODE systems, flows and fundamental matrix solutions.

All right-hand sides and Jacobians are vectorised over leading axes:
``rhs(X)`` maps ``(..., n) -> (..., n)`` and ``jacobian(X)`` maps
``(..., n) -> (..., n, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import integrate
from .errors import ConfigError, EquilibriumError

DEFAULT_TOL = 1e-10
DEFAULT_FMIN = 1e-6


@dataclass(frozen=True)
class SystemDef:
    """Autonomous vector field ``x' = f(x)`` with analytic Jacobian.

    ``sigma`` is recorded smoothness metadata only; nothing checks it.
    ``bound`` is the escape box used by every integration on this system.
    """

    dimension: int
    rhs: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    name: str = "user"
    fmin_threshold: float = DEFAULT_FMIN
    char_time: float = 1.0
    sigma: int | None = None
    bound: float = 1e6
    meta: dict = field(default_factory=dict, compare=False)

    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dimension,):
            raise ConfigError(
                f"{self.name}: expected points of dimension {self.dimension}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ConfigError("point has non-finite coordinates")
        return x

    def guard(self, x, f_x=None):
        """Raise EquilibriumError where ``||f(x)|| <= fmin * (1 + ||x||)``."""
        x = np.asarray(x, dtype=float)
        if f_x is None:
            f_x = self.rhs(x)
        near = np.linalg.norm(f_x, axis=-1) <= self.fmin_threshold * (1 + np.linalg.norm(x, axis=-1))
        if np.any(near):
            bad = np.atleast_2d(x)[np.atleast_1d(near)][0]
            raise EquilibriumError(f"{self.name}: point {bad} is too close to an equilibrium")
        return f_x


@dataclass
class FlowResult:
    endpoint: np.ndarray
    elapsed: float
    est_error: float
    steps: int
    err_max: float = 0.0


@dataclass
class TransitionMatrix:
    base_point: np.ndarray
    t0: float
    t1: float
    matrix: np.ndarray
    est_error: float


@dataclass
class CompactSetStats:
    """Sampled bounds over a compact set.

    Same role as the constants f_m, f_M, f_D, lambda_m, lambda_M used when
    estimating synchronised-pair contraction.
    """

    f_min: float
    f_max: float
    df_max: float
    lambda_min_M: float
    lambda_max_M: float
    lambda_min_B: float = float("nan")
    lambda_max_B: float = float("nan")


# ---------------------------------------------------------------- built-ins

def _circle_rhs(X):
    x, y = X[..., 0], X[..., 1]
    s = 1 - x * x - y * y
    return np.stack([-y + x * s, x + y * s], axis=-1)


def _circle_jac(X):
    x, y = X[..., 0], X[..., 1]
    s = 1 - x * x - y * y
    J = np.empty(X.shape[:-1] + (2, 2))
    J[..., 0, 0] = s - 2 * x * x
    J[..., 0, 1] = -1 - 2 * x * y
    J[..., 1, 0] = 1 - 2 * x * y
    J[..., 1, 1] = s - 2 * y * y
    return J


def circle_system(**kw) -> SystemDef:
    """Planar system whose unit circle is a limit cycle; r' = r(1 - r^2), theta' = 1."""
    return SystemDef(2, _circle_rhs, _circle_jac, name="circle", sigma=np.inf, **kw)


def vdp_system(mu: float = 1.0, **kw) -> SystemDef:
    def rhs(X):
        x, y = X[..., 0], X[..., 1]
        return np.stack([y, mu * (1 - x * x) * y - x], axis=-1)

    def jac(X):
        x, y = X[..., 0], X[..., 1]
        J = np.zeros(X.shape[:-1] + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -2 * mu * x * y - 1
        J[..., 1, 1] = mu * (1 - x * x)
        return J

    return SystemDef(2, rhs, jac, name="vdp", sigma=np.inf, meta={"mu": mu}, **kw)


class PolynomialField:
    """Vector field whose components are sums of monomials.

    ``terms[i]`` is a list of ``(coeff, exponents)`` for component ``i``.
    """

    def __init__(self, n, terms):
        self.n = int(n)
        self.terms = [[(float(c), tuple(int(e) for e in ex)) for c, ex in eq] for eq in terms]
        self._coef = []
        self._exp = []
        for eq in self.terms:
            for _, ex in eq:
                if len(ex) != self.n or min(ex, default=0) < 0:
                    raise ConfigError(f"bad exponent vector {ex} for n={self.n}")
            self._coef.append(np.array([c for c, _ in eq], dtype=float))
            self._exp.append(np.array([ex for _, ex in eq], dtype=int).reshape(-1, self.n))

    def _monomials(self, X, E):
        # (..., k)
        return np.prod(X[..., None, :] ** E, axis=-1)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[:-1] + (len(self.terms),))
        for i, (c, E) in enumerate(zip(self._coef, self._exp)):
            if c.size:
                out[..., i] = self._monomials(X, E) @ c
        return out

    def jacobian(self, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[:-1] + (len(self.terms), self.n))
        for i, (c, E) in enumerate(zip(self._coef, self._exp)):
            if not c.size:
                continue
            for j in range(self.n):
                Ej = E.copy()
                Ej[:, j] = np.maximum(Ej[:, j] - 1, 0)
                out[..., i, j] = self._monomials(X, Ej) @ (c * E[:, j])
        return out


def parse_polynomial_text(text: str) -> tuple[int, list]:
    """Parse the polynomial file format.

    First non-comment line: the dimension n.  Then one block per component,
    blocks separated by blank lines; each line of a block is
    ``coeff e1 ... en``.  Lines starting with ``#`` are ignored.
    """
    lines = [ln.split("#", 1)[0].rstrip() for ln in text.splitlines()]
    while lines and not lines[0].strip():
        lines.pop(0)
    if not lines:
        raise ConfigError("empty polynomial file")
    try:
        n = int(lines[0].split()[0])
    except ValueError as exc:
        raise ConfigError(f"first line must be the dimension, got {lines[0]!r}") from exc
    blocks, cur = [], []
    for ln in lines[1:]:
        if not ln.strip():
            if cur:
                blocks.append(cur)
                cur = []
            continue
        parts = ln.split()
        if len(parts) != n + 1:
            raise ConfigError(f"expected {n + 1} fields per term, got {ln!r}")
        try:
            cur.append((float(parts[0]), tuple(int(p) for p in parts[1:])))
        except ValueError as exc:
            raise ConfigError(f"malformed term {ln!r}") from exc
    if cur:
        blocks.append(cur)
    return n, blocks


def polynomial_system(n, terms, name="poly", **kw) -> SystemDef:
    field_ = PolynomialField(n, terms)
    if len(field_.terms) != n:
        raise ConfigError(f"polynomial system needs {n} equations, got {len(field_.terms)}")
    return SystemDef(n, field_, field_.jacobian, name=name,
                     meta={"terms": field_.terms}, **kw)


def load_polynomial_system(path, **kw) -> SystemDef:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    n, blocks = parse_polynomial_text(text)
    return polynomial_system(n, blocks, name=path.stem, **kw)


BUILTIN = {"circle": circle_system, "vdp": vdp_system}


def get_system(name: str, **kw) -> SystemDef:
    try:
        return BUILTIN[name](**kw)
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; built-ins: {sorted(BUILTIN)}") from None


# --------------------------------------------------------------- operations

def eval_rhs(sys: SystemDef, x) -> np.ndarray:
    return sys.rhs(sys.check_point(x))


def jacobian_fd_error(sys: SystemDef, x, h=1e-3) -> float:
    """Relative error between ``sys.jacobian`` and a Richardson-extrapolated
    central difference of ``sys.rhs`` at a single point."""
    x = sys.check_point(x)
    n = sys.dimension

    def central(h):
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            J[:, j] = (sys.rhs(x + e) - sys.rhs(x - e)) / (2 * h)
        return J

    fd = (4 * central(h / 2) - central(h)) / 3
    J = sys.jacobian(x)
    return float(np.linalg.norm(J - fd) / max(np.linalg.norm(J), 1e-300))


def _flow_fun(sys):
    return sys.rhs


def _var_fun(sys):
    n = sys.dimension

    def fun(Y):
        x = Y[:, :n]
        Phi = Y[:, n:].reshape(-1, n, n)
        dPhi = sys.jacobian(x) @ Phi
        return np.concatenate([sys.rhs(x), dPhi.reshape(-1, n * n)], axis=1)

    return fun


def flow_batch(sys: SystemDef, X, times, tol=DEFAULT_TOL, rtol=None):
    """Flow many points.  ``times`` is (m,) or (m, N); returns the Solution."""
    X = np.atleast_2d(sys.check_point(X))
    return integrate.solve(_flow_fun(sys), X, times, rtol=tol if rtol is None else rtol,
                           atol=tol, bound=sys.bound)


def flow(sys: SystemDef, x, t: float, tol: float = DEFAULT_TOL) -> FlowResult:
    x = sys.check_point(x)
    if t == 0:
        return FlowResult(endpoint=x.copy(), elapsed=0.0, est_error=0.0, steps=0)
    sol = flow_batch(sys, x[None, :], [t], tol=tol)
    return FlowResult(endpoint=sol.ys[-1, 0], elapsed=float(t), est_error=float(sol.err_sum[0]),
                      steps=int(sol.steps[0]), err_max=float(sol.err_max[0]))


def variational_batch(sys: SystemDef, X, times, tol=DEFAULT_TOL):
    """Integrate trajectory and fundamental matrix jointly from Phi(0)=I.

    Returns ``(traj, Phi, sol)`` with shapes (m, N, n) and (m, N, n, n).
    """
    X = np.atleast_2d(sys.check_point(X))
    N, n = X.shape
    Y0 = np.concatenate([X, np.broadcast_to(np.eye(n).ravel(), (N, n * n))], axis=1)
    sol = integrate.solve(_var_fun(sys), Y0, times, rtol=tol, atol=tol,
                          bound=sys.bound, bound_slice=slice(0, n))
    traj = sol.ys[..., :n]
    Phi = sol.ys[..., n:].reshape(sol.ys.shape[:2] + (n, n))
    return traj, Phi, sol


def transition_matrix(sys: SystemDef, x, t0: float, t1: float,
                      tol: float = DEFAULT_TOL) -> TransitionMatrix:
    """Phi(t1, t0; x) for the trajectory passing through x at time 0.

    The base trajectory is first flowed to ``t0``; the variational equation
    is then integrated jointly with the trajectory from there.
    """
    x = sys.check_point(x)
    start = flow(sys, x, t0, tol=tol)
    if t1 == t0:
        return TransitionMatrix(x, t0, t1, np.eye(sys.dimension), start.est_error)
    _, Phi, sol = variational_batch(sys, start.endpoint[None, :], [t1 - t0], tol=tol)
    M = Phi[-1, 0]
    if not np.isfinite(np.linalg.cond(M)):
        raise np.linalg.LinAlgError("transition matrix is singular")
    return TransitionMatrix(x, float(t0), float(t1), M,
                            start.est_error + float(sol.err_sum[0]))


def compact_set_stats(sys: SystemDef, X, M=None, B=None) -> CompactSetStats:
    """Sampled bounds of ||f||, ||Df|| and eigenvalues of M and B over points X."""
    X = np.atleast_2d(X)
    nf = np.linalg.norm(sys.rhs(X), axis=-1)
    ndf = np.linalg.norm(sys.jacobian(X), ord=2, axis=(-2, -1))
    lm = (np.nan, np.nan)
    lb = (np.nan, np.nan)
    if M is not None:
        ev = np.linalg.eigvalsh(M)
        lm = (float(ev.min()), float(ev.max()))
    if B is not None:
        ev = np.linalg.eigvalsh(B)
        lb = (float(ev.min()), float(ev.max()))
    return CompactSetStats(float(nf.min()), float(nf.max()), float(ndf.max()),
                           lm[0], lm[1], lb[0], lb[1])

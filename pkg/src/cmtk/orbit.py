"""Periodic orbit location by Poincare-section shooting, monodromy and Floquet data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import EquilibriumError, NoOrbitError
from .systems import SystemDef, flow, flow_batch, variational_batch

log = logging.getLogger(__name__)

ORBIT_INT_TOL = 1e-12


@dataclass
class PeriodicOrbitRecord:
    anchor: np.ndarray
    period: float
    samples: np.ndarray
    monodromy: np.ndarray
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    exponents: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    residual: float = np.nan
    trivial_index: int = -1
    nu: float = np.nan
    defective: bool = False
    newton_iterations: int = 0

    @property
    def trivial_multiplier(self):
        return self.multipliers[self.trivial_index]

    @property
    def trivial_exponent(self):
        return self.exponents[self.trivial_index]

    @property
    def nontrivial_exponents(self):
        """Non-trivial exponents sorted by descending real part."""
        rest = np.delete(self.exponents, self.trivial_index)
        return rest[np.argsort(-rest.real, kind="stable")]


def _section_crossing(sys, p0, normal, max_period, dt, tol, window=None):
    # scan in windows so short periods do not pay for the whole max_period
    window = 10 * sys.char_time if window is None else window
    t0, y0, g0 = 0.0, p0, 0.0
    scale = 0.0
    while t0 < max_period:
        times = np.arange(dt, min(window, max_period - t0) + dt / 2, dt)
        traj = flow_batch(sys, y0[None, :], times, tol=tol).ys[:, 0, :]
        g = np.concatenate([[g0], (traj - p0) @ normal])
        pts = np.concatenate([y0[None, :], traj])
        ts = np.concatenate([[t0], t0 + times])
        scale = max(scale, float(np.max(np.linalg.norm(traj - p0, axis=1))))
        for k in range(1, len(ts)):
            if g[k - 1] < 0 <= g[k] and np.linalg.norm(pts[k] - p0) < 0.25 * scale + 10 * dt:
                a, b, ya = ts[k - 1], ts[k], pts[k - 1]

                def h(t):
                    return (flow(sys, ya, t - a, tol=tol).endpoint - p0) @ normal

                return brentq(h, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps)
        t0, y0, g0 = ts[-1], pts[-1], g[-1]
    raise NoOrbitError(f"no return to the section within {max_period} time units")


def find_periodic_orbit(sys: SystemDef, guess, tol: float = 1e-10, warmup: float | None = None,
                        max_period: float | None = None, n_samples: int = 200,
                        max_iter: int = 25, int_tol: float = ORBIT_INT_TOL) -> PeriodicOrbitRecord:
    """Relax forward, then Newton on the return map with a monodromy Jacobian."""
    x = sys.check_point(guess)
    try:
        sys.guard(x)
    except EquilibriumError as exc:
        raise EquilibriumError(f"guess {x} is an equilibrium") from exc
    warmup = 50 * sys.char_time if warmup is None else warmup
    max_period = 100 * sys.char_time if max_period is None else max_period

    p0 = flow(sys, x, warmup, tol=1e-10).endpoint
    try:
        f0 = sys.guard(p0)
    except EquilibriumError as exc:
        raise EquilibriumError(f"forward flow from {x} converges to an equilibrium") from exc
    normal = f0 / np.linalg.norm(f0)
    T = _section_crossing(sys, p0, normal, max_period, dt=0.05 * sys.char_time, tol=1e-10)
    log.debug("first return time %.12g", T)

    n = sys.dimension
    z = p0.copy()
    res = np.inf
    for it in range(1, max_iter + 1):
        traj, Phi, _ = variational_batch(sys, z[None, :], [T], tol=int_tol)
        xT, mono = traj[-1, 0], Phi[-1, 0]
        F = np.concatenate([xT - z, [normal @ (z - p0)]])
        res = np.linalg.norm(xT - z)
        if res <= tol and abs(F[-1]) <= tol:
            break
        J = np.zeros((n + 1, n + 1))
        J[:n, :n] = mono - np.eye(n)
        J[:n, n] = sys.rhs(xT)
        J[n, :n] = normal
        step = np.linalg.lstsq(J, -F, rcond=None)[0]
        z = z + step[:n]
        T = T + step[n]
        if not np.all(np.isfinite(z)) or T <= 0:
            raise NoOrbitError("Newton iteration diverged")
    else:
        raise NoOrbitError(f"Newton stagnated with residual {res:.3g} > {tol:.3g}")

    ts = np.linspace(0.0, T, n_samples, endpoint=False)
    samples = np.concatenate([z[None, :], flow_batch(sys, z[None, :], ts[1:], tol=int_tol).ys[:, 0, :]])
    rec = PeriodicOrbitRecord(anchor=z, period=float(T), samples=samples, monodromy=mono,
                              residual=float(res), newton_iterations=it)
    floquet_exponents(rec, sys.rhs(z))
    return rec


def floquet_exponents(rec: PeriodicOrbitRecord, f_anchor=None, tie_tol: float = 1e-3):
    """Fill multipliers/exponents on ``rec`` and return the exponents.

    The trivial multiplier is the one nearest 1; when several lie within
    ``tie_tol`` of 1 the one whose eigenvector is best aligned with the flow
    direction wins.  Exponents use the principal logarithm, i.e. the
    representative with the smallest imaginary part.
    """
    mu, V = np.linalg.eig(rec.monodromy)
    dist = np.abs(mu - 1)
    near = np.nonzero(dist < tie_tol)[0]
    if near.size > 1 and f_anchor is not None:
        fa = np.asarray(f_anchor, dtype=float)
        cos = [abs(np.vdot(V[:, i], fa)) / (np.linalg.norm(V[:, i]) * np.linalg.norm(fa)) for i in near]
        k = int(near[int(np.argmax(cos))])
    else:
        k = int(np.argmin(dist))
    rec.multipliers = mu.astype(complex)
    rec.exponents = np.log(rec.multipliers) / rec.period
    rec.trivial_index = k
    rec.defective = bool(np.linalg.cond(V) > 1e8)
    if rec.defective:
        log.warning("monodromy matrix is (nearly) defective; exponents may be inaccurate")
    rest = np.delete(rec.exponents, k)
    rec.nu = float(-np.max(rest.real)) if rest.size else np.nan
    return rec.exponents

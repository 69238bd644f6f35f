"""Batched embedded Runge-Kutta 5(4) integrator (Dormand-Prince) with PI control.

Every row of the state array carries its own time, step size and controller
memory, so the trajectory of one row does not depend on which other rows
share the batch.  Right-hand sides are autonomous and vectorised: ``fun``
receives an ``(m, d)`` array and returns an array of the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EscapeError, IntegrationError

# Dormand-Prince 5(4) tableau
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

# PI controller constants (Hairer & Wanner, DOPRI5)
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-10


@dataclass
class Solution:
    """Result of :func:`solve`.

    ys : (m, N, d) states at the requested output times.
    err_max : (N,) largest accepted weighted error norm (<= 1 by construction).
    err_sum : (N,) sum of the absolute (inf-norm) local error estimates.
    steps : (N,) accepted steps.
    """

    ts: np.ndarray
    ys: np.ndarray
    err_max: np.ndarray
    err_sum: np.ndarray
    steps: np.ndarray


def _initial_step(fun, y, f0, rtol, atol):
    sc = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2, axis=1))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2, axis=1))
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y + h0[:, None] * f0
    f1 = fun(y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2, axis=1)) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3),
                  (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    return np.minimum(100 * h0, h1)


def solve(fun, y0, times, *, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, bound=None,
          bound_slice=None, max_steps=200_000, h_init=None, groups=None):
    """Integrate ``y' = fun(y)`` from t=0 for every row of ``y0``.

    Parameters
    ----------
    fun : callable (m, d) -> (m, d)
    y0 : (N, d) array
    times : (m,) or (m, N) array of output times.  Each row is integrated
        through its own column of targets in order; targets may be negative
        (backward integration) but must be monotone per row.
    bound : float, optional
        Raise :class:`EscapeError` if ``max |y[:, bound_slice]|`` exceeds it.
    groups : (N,) int array, optional
        Rows sharing a label advance in lockstep with a common step sequence
        (error norm = max over the group).  They must share output times.
        Finite differences across such rows are then free of step-selection
        jitter.
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim != 2:
        raise ValueError("y0 must be (N, d)")
    N, d = y.shape
    times = np.asarray(times, dtype=float)
    if times.ndim == 1:
        targets = np.broadcast_to(times[:, None], (times.size, N))
    else:
        targets = times
    m = targets.shape[0]
    bsl = slice(None) if bound_slice is None else bound_slice

    out = np.empty((m, N, d))
    t = np.zeros(N)
    k1 = fun(y)
    if h_init is None:
        h_abs = _initial_step(fun, y, k1, rtol, atol)
    else:
        h_abs = np.full(N, float(h_init))
    if groups is not None:
        groups = np.asarray(groups, dtype=int)
        n_groups = int(groups.max()) + 1
        gmin = np.full(n_groups, np.inf)
        np.minimum.at(gmin, groups, h_abs)
        h_abs = gmin[groups]
    err_old = np.full(N, 1e-4)
    err_max = np.zeros(N)
    err_sum = np.zeros(N)
    steps = np.zeros(N, dtype=int)
    K = np.empty((7, N, d))

    for j in range(m):
        target = targets[j]
        while True:
            active = np.nonzero(t != target)[0]
            if active.size == 0:
                break
            ya = y[active]
            ta = t[active]
            rem = target[active] - ta
            direction = np.sign(rem)
            ha = np.minimum(h_abs[active], np.abs(rem))
            hit = ha >= np.abs(rem) * (1 - 1e-12)
            ha = np.where(hit, np.abs(rem), ha)
            tiny = ~hit & (ha <= 16 * np.finfo(float).eps * np.maximum(1.0, np.abs(ta)))
            if np.any(tiny):
                bad = active[tiny]
                raise IntegrationError(
                    f"step size underflow at t={t[bad[0]]:.6g}", t=t.copy(), y=y.copy())
            hs = (direction * ha)[:, None]

            Ka = K[:, :active.size]
            Ka[0] = k1[active]
            for i in range(1, 7):
                yi = ya.copy()
                for jj, a in enumerate(_A[i]):
                    if a != 0.0:
                        yi += hs * (a * Ka[jj])
                Ka[i] = fun(yi)
            # stage 7 is evaluated at y_new (FSAL)
            y_new = yi
            # fixed-order sum: BLAS reductions may round differently per batch size
            acc_e = np.zeros_like(ya)
            for i in range(7):
                if _E[i] != 0.0:
                    acc_e += _E[i] * Ka[i]
            err_vec = hs * acc_e
            sc = atol + rtol * np.maximum(np.abs(ya), np.abs(y_new))
            err = np.sqrt(np.mean((err_vec / sc) ** 2, axis=1))
            err = np.where(np.isfinite(err), err, np.inf)
            err_row = err
            if groups is not None:
                gmax = np.zeros(n_groups)
                np.maximum.at(gmax, groups[active], err)
                err = gmax[groups[active]]
            accept = err <= 1.0

            fac = np.where(
                accept,
                _SAFETY * np.maximum(err, 1e-10) ** (-_ALPHA) * err_old[active] ** _BETA,
                _SAFETY * np.maximum(err, 1e-10) ** (-0.2),
            )
            fac = np.clip(fac, _FAC_MIN, np.where(accept, _FAC_MAX, 1.0))
            fac = np.where(np.isfinite(fac), fac, _FAC_MIN)
            h_abs[active] = ha * fac

            acc = active[accept]
            if acc.size:
                y_acc = y_new[accept]
                if bound is not None and np.any(np.abs(y_acc[:, bsl]) > bound):
                    raise EscapeError("trajectory left the bounding box",
                                      t=t.copy(), y=y.copy())
                y[acc] = y_acc
                t[acc] = np.where(hit[accept], target[acc], ta[accept] + (hs[accept, 0]))
                k1[acc] = Ka[6][accept]
                err_old[acc] = np.maximum(err[accept], 1e-4)
                err_max[acc] = np.maximum(err_max[acc], err_row[accept])
                err_sum[acc] += np.max(np.abs(err_vec[accept]), axis=1)
                steps[acc] += 1
                if np.any(steps[acc] > max_steps):
                    raise IntegrationError("step budget exhausted", t=t.copy(), y=y.copy())
        out[j] = y
    return Solution(ts=np.array(targets), ys=out, err_max=err_max, err_sum=err_sum,
                    steps=steps)

"""Embedded Dormand-Prince 4(5) integrator used as the reference oracle.

Standard error-per-step control on a mixed absolute/relative RMS norm, local
extrapolation (the 5th-order solution is propagated) and the usual quartic
continuous extension for dense output.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from numba import njit

from .fixed import DivergenceError, IntegrationError, _grow, _grow1
from .models import HhtOdeSystem, ModelKernels

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
A = np.array([
    [0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
])
B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# difference between the 5th- and embedded 4th-order weights (7 stages, FSAL)
E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# dense-output polynomial coefficients (Shampine's quartic interpolant)
P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

MIN_STEP = 1e-14


@dataclass
class RK45Result:
    """Accepted steps plus, when requested, dense output at ``eval_times``."""

    times: np.ndarray
    states: np.ndarray
    eval_times: np.ndarray
    eval_states: np.ndarray
    n_rejected: int


@functools.lru_cache(maxsize=None)
def _dopri_kernel(kernels: ModelKernels):
    rhs = kernels.rhs

    @njit(cache=True, nogil=True)
    def run(u0, t_end, p, src, rtol, atol, h0, t_eval, store_steps, cA, cB, cE, cP):
        n = u0.size
        K = np.empty((7, n))
        cap = 1024 if store_steps else 1
        ts = np.empty(cap)
        ys = np.empty((cap, n))
        ts[0] = 0.0
        ys[0] = u0
        n_acc = 1
        ev = np.empty((t_eval.size, n))
        ie = 0
        while ie < t_eval.size and t_eval[ie] <= 0.0:
            ev[ie] = u0
            ie += 1
        t = 0.0
        y = u0.copy()
        K[0] = rhs(y, p, src)
        h = h0
        if h <= 0.0:
            # Hairer's starting-step heuristic
            scale = atol + np.abs(y) * rtol
            d0 = np.sqrt(np.mean((y / scale) ** 2))
            d1 = np.sqrt(np.mean((K[0] / scale) ** 2))
            if d0 < 1e-5 or d1 < 1e-5:
                h = 1e-6
            else:
                h = 0.01 * d0 / d1
            h = min(h, t_end)
        rejected = 0
        status = 0
        step_rejected = False
        while t_end - t > 1e-13 * max(1.0, abs(t_end)):
            if h < MIN_STEP:
                status = 2
                break
            if t + h > t_end:
                h = t_end - t
            for s in range(1, 6):
                dy = np.zeros(n)
                for r in range(s):
                    dy += cA[s, r] * K[r]
                K[s] = rhs(y + h * dy, p, src)
            dy = np.zeros(n)
            for r in range(6):
                dy += cB[r] * K[r]
            y_new = y + h * dy
            K[6] = rhs(y_new, p, src)
            err_vec = np.zeros(n)
            for r in range(7):
                err_vec += cE[r] * K[r]
            scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
            err = np.sqrt(np.mean((h * err_vec / scale) ** 2))
            if not np.isfinite(err):
                status = 1
                break
            if err <= 1.0:
                t_new = t + h if t + h < t_end else t_end
                # dense output for every requested time in (t, t_new]
                while ie < t_eval.size and t_eval[ie] <= t_new:
                    x = (t_eval[ie] - t) / h
                    xp = np.array([x, x * x, x ** 3, x ** 4])
                    Q = K.T @ cP
                    ev[ie] = y + h * (Q @ xp)
                    ie += 1
                t = t_new
                y = y_new
                K[0] = K[6]
                if store_steps:
                    ts = _grow1(ts, n_acc + 1)
                    ys = _grow(ys, n_acc + 1)
                    ts[n_acc] = t
                    ys[n_acc] = y
                    n_acc += 1
                if err == 0.0:
                    factor = 10.0
                else:
                    factor = min(10.0, 0.9 * err ** -0.2)
                if step_rejected:
                    factor = min(1.0, factor)
                step_rejected = False
                h *= factor
            else:
                rejected += 1
                step_rejected = True
                h *= max(0.2, 0.9 * err ** -0.2)
        if status == 0:
            # requested times within the final rounding gap
            while ie < t_eval.size:
                ev[ie] = y
                ie += 1
        return ts[:n_acc], ys[:n_acc], ev[:ie], rejected, status, t

    return run


def integrate_rk45(system: HhtOdeSystem, u0, T: float, tol: float = 1e-10, dt_initial: float | None = None,
                   t_eval=None, store_steps: bool = True, atol: float | None = None) -> RK45Result:
    """Integrate ``system`` over ``[0, T]`` with Dormand-Prince 4(5).

    ``tol`` is used as relative tolerance and, unless ``atol`` is given, as
    absolute tolerance too.  Raises :class:`IntegrationError` if the step
    size drops below ``1e-14``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    u0 = np.asarray(u0, dtype=np.float64)
    t_eval = np.empty(0) if t_eval is None else np.asarray(t_eval, dtype=np.float64)
    if t_eval.size and (np.any(np.diff(t_eval) < 0) or t_eval[-1] > T):
        raise ValueError("t_eval must be sorted and within [0, T]")
    run = _dopri_kernel(system.kernels)
    ts, ys, ev, rejected, status, t_reached = run(
        u0, float(T), system.params, system.source, float(tol), float(tol if atol is None else atol),
        float(dt_initial or 0.0), t_eval, store_steps, A, B, E, P)
    if status == 1:
        raise DivergenceError(f"rk45 baseline: non-finite error estimate at t={t_reached:g}", time=t_reached)
    if status == 2:
        raise IntegrationError(f"rk45 baseline: step size underflow at t={t_reached:g}", time=t_reached)
    return RK45Result(ts, ys, t_eval, ev, int(rejected))


def step_rk45_baseline(system: HhtOdeSystem, u_n, dt_initial: float, tol: float, t_span: float | None = None):
    """Advance ``u_n`` over one segment of length ``t_span`` (default ``dt_initial``).

    Returns the dense segment ``(times, states)`` of accepted steps.
    """
    res = integrate_rk45(system, u_n, t_span or dt_initial, tol=tol, dt_initial=dt_initial)
    return res.times, res.states

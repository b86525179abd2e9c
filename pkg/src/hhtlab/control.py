"""Adaptive step-size control.

Two families of controllers:

* a PID controller on the relative change of the solution between steps,
  driving an iterative Crank-Nicolson integrator without rejections
  (``pidicn``);
* step-doubling (Richardson) controllers that compare one step of size
  ``dt`` with ``m`` steps of size ``dt / m`` and reject until the difference
  is small enough (``aicn`` for order 2, ``ark4``/``airk4`` for order 4).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .fixed import (DivergenceError, IntegrationError, Trajectory, _all_finite, _grow, _grow1,
                    _norm, step_kernel)
from .models import HhtOdeSystem

ADAPTIVE_SCHEMES = ("pidicn", "aicn", "ark4", "airk4")

# scheme -> (underlying fixed-step scheme, controller order)
_RICHARDSON = {"aicn": ("icn", 2), "ark4": ("mmrk4", 4), "airk4": ("irk4", 4)}

ERROR_FLOOR = 1e-300


class ControllerError(ValueError):
    pass


@dataclass(frozen=True)
class PidParams:
    k_P: float = 0.075
    k_I: float = 0.175
    k_D: float = 0.01
    eps_t: float = 1e-7


PID_PROFILES = {
    "default": PidParams(),
    "hand-tuned": PidParams(k_P=0.025, k_I=0.075, k_D=0.01),
}


@dataclass
class ControllerState:
    """Relative-error history ``(e_{n-2}, e_{n-1}, e_n)``, newest last."""

    errors: list[float] = field(default_factory=list)
    dt: float = 0.01
    step: int = 0

    def push(self, e: float):
        self.errors = (self.errors + [e])[-3:]
        self.step += 1


@dataclass(frozen=True)
class AdaptiveSettings:
    T: float = 500.0
    dt0: float = 0.01
    eps_t: float = 1e-7
    eps_fp: float = 1e-7
    m: int = 2
    max_iter_I: int = 10
    max_iter_J: int = 10
    dt_min: float = 1e-10
    dt_max: float = 10.0
    safety: float = 1.0
    growth_cap: float = 5.0
    max_steps: int = 20_000_000

    def __post_init__(self):
        for name in ("T", "dt0", "eps_t", "eps_fp", "dt_min", "dt_max", "safety"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if self.dt_min > self.dt_max:
            raise ValueError("dt_min must not exceed dt_max")
        if self.growth_cap < 1:
            raise ValueError("growth_cap must be at least 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.max_iter_I < 1 or self.max_iter_J < 1:
            raise ValueError("iteration caps must be at least 1")


@dataclass
class AdaptiveTrajectory(Trajectory):
    """Trajectory with controller bookkeeping.

    ``dt_star[k]`` is the step proposed by the controller after producing
    ``states[k]`` and ``rejections[k]`` the number of rejected attempts that
    preceded it.  Only accepted steps are stored.
    """

    dt_star: np.ndarray = None
    accepted: np.ndarray = None
    rejections: np.ndarray = None

    def _array_fields(self):
        return super()._array_fields() + ("dt_star", "accepted", "rejections")

    @property
    def total_rejections(self) -> int:
        return int(self.rejections.sum())


# --------------------------------------------------------------------------
# error measures and controllers


def relative_error(u_prev, u_next, norm: str = "absolute") -> float:
    """``||u_next - u_prev|| / ||u_next||`` in the Euclidean or maximum norm."""
    u_prev = np.asarray(u_prev, dtype=float)
    u_next = np.asarray(u_next, dtype=float)
    if norm == "absolute":
        nrm = np.linalg.norm
    elif norm == "maximum":
        def nrm(v):
            return float(np.max(np.abs(v)))
    else:
        raise ValueError(f"unknown norm {norm!r}; use 'absolute' or 'maximum'")
    den = nrm(np.atleast_1d(u_next))
    if den == 0:
        raise ControllerError("relative error undefined for a zero state")
    return float(nrm(np.atleast_1d(u_next - u_prev)) / den)


@njit(cache=True)
def _pid_factor(e2, e1, e0, count, eps_t, kP, kI, kD):
    # e0 newest; count = number of errors recorded so far including e0
    e0 = max(e0, ERROR_FLOOR)
    fac = (eps_t / e0) ** kI
    if count >= 2 and e1 > 0.0:
        fac *= (e1 / e0) ** kP
        if count >= 3 and e2 > 0.0:
            fac *= (e1 * e1 / (e0 * e2)) ** kD
    return fac


@njit(cache=True)
def _clamp_step(dt_new, dt_old, dt_min, dt_max, growth_cap):
    return max(dt_min, min(dt_new, growth_cap * dt_old, dt_max))


def pid_next_step(ctrl: ControllerState, p: PidParams, dt_min: float = 1e-10, dt_max: float = 10.0,
                  growth_cap: float = 5.0) -> float:
    """Next step size from the error history held in ``ctrl``.

    The first controlled step uses only the integral factor, the second adds
    the proportional one and later steps use all three.  Non-positive history
    entries drop the factors that need them.
    """
    errs = list(ctrl.errors)
    if not errs:
        raise ControllerError("controller has no error history")
    count = min(len(errs), 3, max(ctrl.step, len(errs)))
    e0 = errs[-1]
    e1 = errs[-2] if len(errs) >= 2 else 0.0
    e2 = errs[-3] if len(errs) >= 3 else 0.0
    fac = _pid_factor(e2, e1, e0, count, p.eps_t, p.k_P, p.k_I, p.k_D)
    return float(_clamp_step(fac * ctrl.dt, ctrl.dt, dt_min, dt_max, growth_cap))


@njit(cache=True)
def _richardson_raw(dt, m, diff_norm, eps_t, order, dt_max):
    if diff_norm <= 0.0:
        return dt_max
    q = float(order)
    val = (eps_t * dt ** q * (m ** q - 1.0) / diff_norm) ** (1.0 / q)
    return min(val, dt_max)


def _richardson(dt, m, diff_norm, eps_t, order, dt_min, dt_max):
    if not dt > 0:
        raise ControllerError("dt must be positive")
    if m < 2:
        raise ControllerError("m must be at least 2")
    if diff_norm < 0 or math.isnan(diff_norm):
        raise ControllerError("difference norm must be non-negative")
    return max(dt_min, _richardson_raw(float(dt), float(m), float(diff_norm), float(eps_t), order, dt_max))


def richardson_step_order2(dt: float, m: int, diff_norm: float, eps_t: float,
                           dt_min: float = 1e-10, dt_max: float = 10.0) -> float:
    """Optimal step for a second-order scheme: ``sqrt(eps dt^2 (m^2-1) / diff)``."""
    return _richardson(dt, m, diff_norm, eps_t, 2, dt_min, dt_max)


def richardson_step_order4(dt: float, m: int, diff_norm: float, eps_t: float,
                           dt_min: float = 1e-10, dt_max: float = 10.0) -> float:
    """Optimal step for a fourth-order scheme: ``(eps dt^4 (m^4-1) / diff)^(1/4)``."""
    return _richardson(dt, m, diff_norm, eps_t, 4, dt_min, dt_max)


# --------------------------------------------------------------------------
# compiled drivers


@functools.lru_cache(maxsize=None)
def _pid_driver(kernels):
    step = step_kernel(kernels, "icn")

    @njit(cache=True, nogil=True)
    def run(u0, T, dt0, p, src, eps_fp, max_i, max_j, eps_t, kP, kI, kD, dt_min, dt_max, growth_cap, max_steps):
        n = u0.size
        cap = 1024
        ts = np.zeros(cap)
        ys = np.empty((cap, n))
        its = np.zeros(cap, dtype=np.int64)
        oks = np.ones(cap, dtype=np.bool_)
        dts = np.zeros(cap)
        stars = np.zeros(cap)
        ys[0] = u0
        stars[0] = dt0
        k = 1
        t = 0.0
        dt = dt0
        u = u0.copy()
        e2 = 0.0
        e1 = 0.0
        count = 0
        status = 0
        while t < T:
            if k > max_steps:
                status = 3
                break
            new, it, ok = step(u, dt, p, src, eps_fp, max_i, max_j)
            if not _all_finite(new):
                status = 1
                break
            nn = _norm(new)
            e0 = _norm(new - u) / nn if nn > 0.0 else 0.0
            count += 1
            fac = _pid_factor(e2, e1, e0, min(count, 3), eps_t, kP, kI, kD)
            dt_next = _clamp_step(fac * dt, dt, dt_min, dt_max, growth_cap)
            e2 = e1
            e1 = e0
            t = t + dt
            ts = _grow1(ts, k + 1)
            ys = _grow(ys, k + 1)
            its = _grow1(its, k + 1)
            oks = _grow1(oks, k + 1)
            dts = _grow1(dts, k + 1)
            stars = _grow1(stars, k + 1)
            ts[k] = t
            ys[k] = new
            its[k] = it
            oks[k] = ok
            dts[k] = dt
            stars[k] = dt_next
            k += 1
            u = new
            dt = dt_next
        return ts[:k], ys[:k], its[:k], oks[:k], dts[:k], stars[:k], np.zeros(k, dtype=np.int64), status, t

    return run


@functools.lru_cache(maxsize=None)
def _richardson_driver(kernels, scheme):
    base, order = _RICHARDSON[scheme]
    step = step_kernel(kernels, base)

    @njit(cache=True, nogil=True)
    def run(u0, T, dt0, p, src, eps_fp, max_i, max_j, eps_t, m, dt_min, dt_max, safety, growth_cap, max_steps):
        n = u0.size
        cap = 1024
        ts = np.zeros(cap)
        ys = np.empty((cap, n))
        its = np.zeros(cap, dtype=np.int64)
        oks = np.ones(cap, dtype=np.bool_)
        dts = np.zeros(cap)
        stars = np.zeros(cap)
        rejs = np.zeros(cap, dtype=np.int64)
        ys[0] = u0
        stars[0] = dt0
        k = 1
        t = 0.0
        u = u0.copy()
        dt_next = max(dt_min, min(dt0, dt_max))
        status = 0
        while t < T and status == 0:
            if k > max_steps:
                status = 3
                break
            # the last step is shortened to land on T exactly
            last = dt_next >= T - t
            dt = T - t if last else dt_next
            rejected = 0
            while True:
                big, it, ok = step(u, dt, p, src, eps_fp, max_i, max_j)
                small = u.copy()
                h = dt / m
                for _ in range(m):
                    small, _i, _o = step(small, h, p, src, eps_fp, max_i, max_j)
                if _all_finite(big) and _all_finite(small):
                    star = _richardson_raw(dt, float(m), _norm(big - small), eps_t, order, dt_max)
                else:
                    star = 0.25 * dt
                if dt <= star:
                    break
                rejected += 1
                if star < dt_min:
                    status = 2 if _all_finite(big) else 1
                    break
                dt = star * safety if star * safety < dt else star
                last = False
            if status != 0:
                break
            t = T if last else t + dt
            ts = _grow1(ts, k + 1)
            ys = _grow(ys, k + 1)
            its = _grow1(its, k + 1)
            oks = _grow1(oks, k + 1)
            dts = _grow1(dts, k + 1)
            stars = _grow1(stars, k + 1)
            rejs = _grow1(rejs, k + 1)
            ts[k] = t
            ys[k] = big
            its[k] = it
            oks[k] = ok
            dts[k] = dt
            stars[k] = star
            rejs[k] = rejected
            k += 1
            u = big
            dt_next = _clamp_step(safety * star, dt, dt_min, dt_max, growth_cap)
        return ts[:k], ys[:k], its[:k], oks[:k], dts[:k], stars[:k], rejs[:k], status, t

    return run


def _finish(system, name, out) -> AdaptiveTrajectory:
    ts, ys, its, oks, dts, stars, rejs, status, t = out
    if status == 1:
        raise DivergenceError(f"{name}: non-finite state near t={t:g}", step=len(ts), time=float(t))
    if status == 2:
        raise IntegrationError(f"{name}: step size fell below dt_min near t={t:g}", step=len(ts), time=float(t))
    if status == 3:
        raise IntegrationError(f"{name}: step budget exhausted at t={t:g}", step=len(ts), time=float(t))
    return AdaptiveTrajectory(ts, ys, its, oks, dts, system.labels, name,
                              dt_star=stars, accepted=np.ones(len(ts), dtype=bool), rejections=rejs)


def _check_u0(system, u0):
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != (system.dimension,) or not np.all(np.isfinite(u0)):
        raise ValueError(f"initial state must be a finite vector of length {system.dimension}")
    return u0


def integrate_pidicn(system: HhtOdeSystem, u0, settings: AdaptiveSettings,
                     pid: PidParams | None = None) -> AdaptiveTrajectory:
    """ICN with the PID step-size controller; every step is accepted."""
    pid = pid or PidParams(eps_t=settings.eps_t)
    u0 = _check_u0(system, u0)
    run = _pid_driver(system.kernels)
    out = run(u0, settings.T, settings.dt0, system.params, system.source, settings.eps_fp,
              settings.max_iter_I, settings.max_iter_J, pid.eps_t, pid.k_P, pid.k_I, pid.k_D,
              settings.dt_min, settings.dt_max, settings.growth_cap, settings.max_steps)
    return _finish(system, "pidicn", out)


def _integrate_richardson(system, u0, settings, scheme):
    u0 = _check_u0(system, u0)
    run = _richardson_driver(system.kernels, scheme)
    out = run(u0, settings.T, settings.dt0, system.params, system.source, settings.eps_fp,
              settings.max_iter_I, settings.max_iter_J, settings.eps_t, settings.m,
              settings.dt_min, settings.dt_max, settings.safety, settings.growth_cap, settings.max_steps)
    return _finish(system, scheme, out)


def integrate_aicn(system: HhtOdeSystem, u0, settings: AdaptiveSettings) -> AdaptiveTrajectory:
    """Step-doubling controlled ICN (second-order controller)."""
    return _integrate_richardson(system, u0, settings, "aicn")


def integrate_ark4(system: HhtOdeSystem, u0, settings: AdaptiveSettings) -> AdaptiveTrajectory:
    """Step-doubling controlled MMRK4 (fourth-order controller)."""
    return _integrate_richardson(system, u0, settings, "ark4")


def integrate_airk4(system: HhtOdeSystem, u0, settings: AdaptiveSettings) -> AdaptiveTrajectory:
    """Step-doubling controlled IRK4 (fourth-order controller)."""
    return _integrate_richardson(system, u0, settings, "airk4")


def integrate_adaptive(system: HhtOdeSystem, scheme: str, u0, settings: AdaptiveSettings,
                       pid: PidParams | None = None) -> AdaptiveTrajectory:
    if scheme == "pidicn":
        return integrate_pidicn(system, u0, settings, pid)
    if scheme in _RICHARDSON:
        return _integrate_richardson(system, u0, settings, scheme)
    raise ValueError(f"unknown adaptive scheme {scheme!r}; valid: {', '.join(ADAPTIVE_SCHEMES)}")

"""Fixed-step iterative semi-implicit integrators.

Five schemes are provided, all built on Picard (fixed-point) iterations that
start from the previous time level:

``isie``   semi-implicit Euler: explicit observable, implicit activations
``icn``    iterative Crank-Nicolson on the split vector field
``isv``    Stormer-Verlet: half step, implicit activations, half step
``mmrk4``  predictor/corrector chain with the classical RK4 weights
``irk4``   Crank-Nicolson half-step predictor + implicit Simpson corrector

Compiled step and driver kernels are generated per model family and cached.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numba import njit

from .models import HhtOdeSystem, ModelKernels

FIXED_SCHEMES = ("isie", "icn", "isv", "mmrk4", "irk4")
BASELINE = "rk45-baseline"
SCHEME_IDS = FIXED_SCHEMES + (BASELINE,)


class IntegrationError(RuntimeError):
    """Raised when an integration produces a non-finite state or stalls."""

    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


class DivergenceError(IntegrationError):
    pass


@dataclass(frozen=True)
class FixedStepSettings:
    dt: float = 0.01
    T: float = 500.0
    eps_fp: float = 1e-7
    max_iter_I: int = 10
    max_iter_J: int = 10
    rk45_tol: float = 1e-10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.dt > self.T:
            raise ValueError("dt must not exceed T")
        if not self.eps_fp > 0:
            raise ValueError("eps_fp must be positive")
        if self.max_iter_I < 1 or self.max_iter_J < 1:
            raise ValueError("iteration caps must be at least 1")

    @property
    def n_steps(self) -> int:
        # guard against T/dt landing a hair above an integer
        return int(math.ceil(self.T / self.dt * (1.0 - 1e-12)))


@dataclass
class Trajectory:
    """Time grid with states and per-point step metadata.

    Row ``k > 0`` of the metadata describes the step that produced
    ``states[k]``; row 0 is the initial state (zero iterations, ``dt = 0``).
    """

    times: np.ndarray
    states: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    dt: np.ndarray
    labels: tuple[str, ...] = ()
    scheme: str = ""

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def after(self, t0: float) -> "Trajectory":
        """Sub-trajectory with ``t >= t0``."""
        mask = self.times >= t0
        kw = {name: getattr(self, name)[mask] for name in self._array_fields()}
        return type(self)(labels=self.labels, scheme=self.scheme, **kw)

    def _array_fields(self):
        return ("times", "states", "iterations", "converged", "dt")


@dataclass
class StepMeta:
    iterations: int
    converged: bool
    dt: float


class StepScheme(NamedTuple):
    identifier: str
    step: Callable


# --------------------------------------------------------------------------
# fixed-point primitive


def fixed_point_iterate(fmap, u0, eps: float, max_iter: int):
    """Picard iteration ``u_i = fmap(u_{i-1})`` from ``u0``.

    Stops once the Euclidean distance between consecutive iterates is at most
    ``eps`` or after ``max_iter`` iterations.

    Returns
    -------
    (u, iterations, converged)
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    u = np.asarray(u0, dtype=float)
    for i in range(1, max_iter + 1):
        nxt = np.asarray(fmap(u), dtype=float)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"fixed-point iterate {i} is not finite", step=i)
        diff = float(np.linalg.norm(np.atleast_1d(nxt - u)))
        u = nxt
        if diff <= eps:
            return (u if u.ndim else float(u)), i, True
    return (u if u.ndim else float(u)), max_iter, False


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _norm(v):
    s = 0.0
    for k in range(v.size):
        s += v[k] * v[k]
    return math.sqrt(s)


@njit(cache=True)
def _all_finite(v):
    for k in range(v.size):
        if not math.isfinite(v[k]):
            return False
    return True


@njit(cache=True)
def _grow(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty((max(2 * a.shape[0], need), a.shape[1]))
    b[:a.shape[0]] = a
    return b


@njit(cache=True)
def _grow1(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty(max(2 * a.shape[0], need), dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


def _make_isie(k: ModelKernels):
    f1, act_solve = k.f1, k.act_solve

    @njit(cache=True)
    def step(u, dt, p, src, eps, max_i, max_j):
        out = np.empty(u.size)
        out[0] = u[0] + dt * (f1(u, p) + src)
        a, it, ok = act_solve(u[1:], out[0], dt, p, eps, max_i)
        out[1:] = a
        return out, it, ok

    return step


def _make_icn(k: ModelKernels):
    f1, f2, act_solve = k.f1, k.f2, k.act_solve

    @njit(cache=True)
    def step(u, dt, p, src, eps, max_i, max_j):
        h = 0.5 * dt
        f1n = f1(u, p)
        # trapezoidal activation equation a = a_n + h f2(u_n) + h f2(x_i, a)
        a_base = u[1:] + h * f2(u, p)
        prev = u.copy()
        cur = np.empty(u.size)
        it = 0
        ok = False
        while it < max_i:
            it += 1
            cur[0] = u[0] + h * (f1(prev, p) + f1n) + dt * src
            a, _, _ = act_solve(a_base, cur[0], h, p, eps, max_i)
            cur[1:] = a
            diff = 0.0
            for q in range(u.size):
                diff += (cur[q] - prev[q]) ** 2
            prev[:] = cur
            if math.sqrt(diff) <= eps:
                ok = True
                break
        return prev, it, ok

    return step


def _make_isv(k: ModelKernels):
    f1, act_solve = k.f1, k.act_solve

    @njit(cache=True)
    def step(u, dt, p, src, eps, max_i, max_j):
        h = 0.5 * dt
        out = np.empty(u.size)
        out[0] = u[0] + h * (f1(u, p) + src)
        a, it, ok = act_solve(u[1:], out[0], dt, p, eps, max_i)
        out[1:] = a
        out[0] = out[0] + h * (f1(out, p) + src)
        return out, it, ok

    return step


def _make_mmrk4(k: ModelKernels):
    rhs = k.rhs

    @njit(cache=True)
    def step(u, dt, p, src, eps, max_i, max_j):
        F0 = rhs(u, p, src)
        pred_half = u + 0.5 * dt * F0          # forward Euler predictor
        F1 = rhs(pred_half, p, src)
        corr_half = u + 0.5 * dt * F1          # corrector at the midpoint
        F2 = rhs(corr_half, p, src)
        pred_full = u + dt * F2                # midpoint predictor
        F3 = rhs(pred_full, p, src)
        return u + dt / 6.0 * (F0 + 2.0 * F1 + 2.0 * F2 + F3), 1, True

    return step


def _make_irk4(k: ModelKernels):
    rhs = k.rhs

    @njit(cache=True)
    def step(u, dt, p, src, eps, max_i, max_j):
        Fn = rhs(u, p, src)
        half = u.copy()
        i = 0
        ok_i = False
        while i < max_i:
            i += 1
            nxt = u + 0.25 * dt * (Fn + rhs(half, p, src))
            d = _norm(nxt - half)
            half = nxt
            if d <= eps:
                ok_i = True
                break
        G = Fn + 4.0 * rhs(half, p, src)
        full = u.copy()
        j = 0
        ok_j = False
        while j < max_j:
            j += 1
            nxt = u + dt / 6.0 * (G + rhs(full, p, src))
            d = _norm(nxt - full)
            full = nxt
            if d <= eps:
                ok_j = True
                break
        return full, max(i, j), ok_i and ok_j

    return step


_FACTORIES = {"isie": _make_isie, "icn": _make_icn, "isv": _make_isv,
              "mmrk4": _make_mmrk4, "irk4": _make_irk4}


@functools.lru_cache(maxsize=None)
def step_kernel(kernels: ModelKernels, scheme: str):
    """Compiled ``step(u, dt, p, src, eps, max_i, max_j) -> (u, iters, ok)``."""
    try:
        factory = _FACTORIES[scheme]
    except KeyError:
        raise ValueError(f"unknown fixed-step scheme {scheme!r}; valid: {', '.join(FIXED_SCHEMES)}") from None
    return factory(kernels)


@functools.lru_cache(maxsize=None)
def driver_kernel(kernels: ModelKernels, scheme: str):
    step = step_kernel(kernels, scheme)

    @njit(cache=True, nogil=True)
    def run(u0, dt, n, p, src, eps, max_i, max_j):
        states = np.empty((n + 1, u0.size))
        iters = np.zeros(n + 1, dtype=np.int64)
        conv = np.ones(n + 1, dtype=np.bool_)
        states[0] = u0
        for k in range(n):
            new, it, ok = step(states[k], dt, p, src, eps, max_i, max_j)
            if not _all_finite(new):
                return states, iters, conv, k + 1
            states[k + 1] = new
            iters[k + 1] = it
            conv[k + 1] = ok
        return states, iters, conv, -1

    return run


# --------------------------------------------------------------------------
# public API


def get_scheme(name: str) -> StepScheme:
    """Look up a fixed-step scheme by identifier."""
    if name not in FIXED_SCHEMES:
        raise ValueError(f"unknown scheme {name!r}; valid: {', '.join(SCHEME_IDS)}")

    def step(system: HhtOdeSystem, u, dt: float, settings: FixedStepSettings | None = None):
        settings = settings or FixedStepSettings(dt=max(dt, 1e-300), T=max(dt, 1.0))
        u = np.asarray(u, dtype=np.float64)
        if dt == 0:
            return u.copy(), StepMeta(0, True, 0.0)
        kern = step_kernel(system.kernels, name)
        new, it, ok = kern(u, float(dt), system.params, system.source,
                           settings.eps_fp, settings.max_iter_I, settings.max_iter_J)
        if not _all_finite(new):
            raise DivergenceError(f"{name} step produced a non-finite state", step=1)
        return new, StepMeta(int(it), bool(ok), float(dt))

    return StepScheme(name, step)


def step_isie(system, u_n, dt, settings=None):
    return get_scheme("isie").step(system, u_n, dt, settings)


def step_icn(system, u_n, dt, settings=None):
    return get_scheme("icn").step(system, u_n, dt, settings)


def step_isv(system, u_n, dt, settings=None):
    return get_scheme("isv").step(system, u_n, dt, settings)


def step_mmrk4(system, u_n, dt, settings=None):
    return get_scheme("mmrk4").step(system, u_n, dt, settings)


def step_irk4(system, u_n, dt, settings=None):
    return get_scheme("irk4").step(system, u_n, dt, settings)


def integrate(system: HhtOdeSystem, scheme: str | StepScheme, u0, settings: FixedStepSettings) -> Trajectory:
    """Integrate on the uniform grid ``t_k = k * dt`` until ``t_k >= T``.

    The result includes the initial state.  ``scheme`` may also be
    ``"rk45-baseline"``, in which case the Dormand-Prince oracle is sampled on
    the same grid through its dense output.
    """
    name = scheme.identifier if isinstance(scheme, StepScheme) else scheme
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != (system.dimension,):
        raise ValueError(f"initial state must have shape ({system.dimension},)")
    if not np.all(np.isfinite(u0)):
        raise ValueError("initial state must be finite")
    n = settings.n_steps
    times = np.arange(n + 1) * settings.dt
    if name == BASELINE:
        from .rk45 import integrate_rk45

        res = integrate_rk45(system, u0, float(times[-1]), tol=settings.rk45_tol, t_eval=times)
        return Trajectory(times, res.eval_states, np.zeros(n + 1, dtype=np.int64),
                          np.ones(n + 1, dtype=bool), np.r_[0.0, np.diff(times)],
                          system.labels, name)
    if name not in FIXED_SCHEMES:
        raise ValueError(f"unknown scheme {name!r}; valid: {', '.join(SCHEME_IDS)}")
    run = driver_kernel(system.kernels, name)
    states, iters, conv, fail = run(u0, settings.dt, n, system.params, system.source,
                                    settings.eps_fp, settings.max_iter_I, settings.max_iter_J)
    if fail >= 0:
        raise DivergenceError(f"{name}: non-finite state at step {fail} (t={fail * settings.dt:g})",
                              step=int(fail), time=float(fail * settings.dt))
    dts = np.full(n + 1, settings.dt)
    dts[0] = 0.0
    return Trajectory(times, states, iters, conv, dts, system.labels, name)

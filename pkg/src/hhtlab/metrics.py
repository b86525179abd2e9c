"""Norms, statistics, convergence studies and runtime benchmarks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fixed import FixedStepSettings, IntegrationError, Trajectory, integrate
from .models import HhtOdeSystem


def local_l2_state_norm(u, dt: float) -> float:
    """``sqrt(dt * |u|^2)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(dt * np.dot(u, u)))


def local_l2_derivative_norm(u_n, u_next, dt: float) -> float:
    """``sqrt(dt * |(u_next - u_n) / dt|^2)`` with a forward-difference derivative."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    d = (np.asarray(u_next, dtype=float) - np.asarray(u_n, dtype=float)) / dt
    return float(np.sqrt(dt * np.dot(d, d)))


@dataclass
class NormReport:
    global_state_norm: float
    global_derivative_norm: float
    local_state: np.ndarray
    local_derivative: np.ndarray


def _local_series(traj: Trajectory):
    t = np.asarray(traj.times, dtype=float)
    u = np.asarray(traj.states, dtype=float)
    if len(t) < 2:
        raise ValueError("need at least two time points")
    h = np.diff(t)
    # left-point rule: step n contributes u(t^n) over [t^n, t^{n+1}]
    state = np.sqrt(h * np.einsum("ij,ij->i", u[:-1], u[:-1]))
    du = np.diff(u, axis=0) / h[:, None]
    deriv = np.sqrt(h * np.einsum("ij,ij->i", du, du))
    return state, deriv


def global_l2_norms(traj: Trajectory) -> NormReport:
    """Global L2 norms in time, summing squared local norms over variable steps."""
    state, deriv = _local_series(traj)
    return NormReport(float(np.sqrt(np.sum(state ** 2))), float(np.sqrt(np.sum(deriv ** 2))), state, deriv)


def local_norm_statistics(traj: Trajectory) -> tuple[float, float]:
    """Mean and population variance of the local state norms."""
    state, _ = _local_series(traj)
    return float(np.mean(state)), float(np.var(state))


# --------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceReport:
    scheme: str
    dts: np.ndarray
    errors: np.ndarray
    runtimes_ns: np.ndarray
    failed_level: int | None = None
    message: str = ""

    @property
    def slope(self) -> float:
        """Least-squares slope of ``log2(error)`` against level."""
        e = self.errors
        if len(e) < 2 or np.any(e <= 0):
            return float("nan")
        k = np.arange(len(e))
        return float(np.polyfit(k, np.log2(e), 1)[0])

    @property
    def order(self) -> float:
        return -self.slope

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.errors) < 0))

    def rows(self):
        # error k compares level k with level k + 1; the last level has none
        for k, dt in enumerate(self.dts):
            err = self.errors[k] if k < len(self.errors) else float("nan")
            yield k, float(dt), float(err), int(self.runtimes_ns[k])


def trapezoid_error(times, a, b) -> float:
    """Trapezoidal integral in time of ``|a(t) - b(t)|_2``."""
    return float(np.trapezoid(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1), times))


def _timed(system, scheme, u0, settings):
    t0 = time.perf_counter_ns()
    traj = integrate(system, scheme, u0, settings)
    return traj, time.perf_counter_ns() - t0


def convergence_study(system: HhtOdeSystem, scheme: str, dt0: float, levels: int, horizon: float,
                      eps_fp: float = 1e-7, max_iter: int = 5, u0=None, exact: Callable | None = None
                      ) -> ConvergenceReport:
    """Run ``scheme`` at ``dt0 / 2^k`` for ``k < levels`` and measure the error decay.

    Without ``exact`` the error for level k integrates the distance between
    levels k and k + 1 over the coarse grid (the fine run is subsampled; grids
    nest exactly).  With ``exact(times) -> states`` each level is compared
    with the exact solution instead.  A failing level ends the study and the
    partial report is returned with ``failed_level`` set.
    """
    if levels < 3:
        raise ValueError("levels must be at least 3")
    u0 = np.zeros(system.dimension) if u0 is None else np.asarray(u0, dtype=float)
    dts, runtimes, trajs = [], [], []
    failed, msg = None, ""
    # one-step run so compilation is not charged to level 0
    try:
        integrate(system, scheme, u0, FixedStepSettings(dt=dt0, T=dt0, eps_fp=eps_fp, max_iter_I=max_iter,
                                                        max_iter_J=max_iter))
    except IntegrationError:
        pass
    for k in range(levels):
        dt = dt0 / 2 ** k
        settings = FixedStepSettings(dt=dt, T=horizon, eps_fp=eps_fp, max_iter_I=max_iter, max_iter_J=max_iter)
        try:
            traj, ns = _timed(system, scheme, u0, settings)
        except IntegrationError as exc:
            failed, msg = k, str(exc)
            break
        dts.append(dt)
        runtimes.append(ns)
        trajs.append(traj)
    errors = []
    if exact is not None:
        for traj in trajs:
            errors.append(trapezoid_error(traj.times, traj.states, exact(traj.times)))
    else:
        for coarse, fine in zip(trajs, trajs[1:]):
            sub = fine.states[::2]
            if not np.array_equal(fine.times[::2], coarse.times):
                raise AssertionError("nested grids do not coincide")
            errors.append(trapezoid_error(coarse.times, coarse.states, sub))
    return ConvergenceReport(scheme, np.array(dts), np.array(errors), np.array(runtimes, dtype=np.int64),
                             failed, msg)


# --------------------------------------------------------------------------
# benchmarks


@dataclass
class BenchJob:
    system: HhtOdeSystem
    scheme: str
    u0: np.ndarray
    settings: object

    def __call__(self):
        from .control import ADAPTIVE_SCHEMES, integrate_adaptive

        if self.scheme in ADAPTIVE_SCHEMES:
            return integrate_adaptive(self.system, self.scheme, self.u0, self.settings)
        return integrate(self.system, self.scheme, self.u0, self.settings)


@dataclass
class BenchmarkResult:
    times_s: np.ndarray
    outputs: list = field(default_factory=list, repr=False)

    @property
    def min(self) -> float:
        return float(np.min(self.times_s))

    @property
    def mean(self) -> float:
        return float(np.mean(self.times_s))

    @property
    def max(self) -> float:
        return float(np.max(self.times_s))


def runtime_benchmark(job: Callable, repetitions: int = 5, keep_outputs: bool = False) -> BenchmarkResult:
    """Wall-clock ``job()`` ``repetitions`` times after one untimed warm-up run."""
    if repetitions < 3:
        raise ValueError("repetitions must be at least 3")
    job()
    times, outs = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        out = job()
        times.append(time.perf_counter() - t0)
        if keep_outputs:
            outs.append(out)
    return BenchmarkResult(np.array(times), outs)

"""Dynamical-systems analysis of the disease model.

Fixed points come from the scalar reduction ``g(x; S) = 0`` obtained by
setting every activation to its sigmoid equilibrium.  On top of that the
module provides Jacobian eigenvalue sweeps, a Benettin/QR Lyapunov spectrum,
Poincare sections, interspike intervals and an ISI bifurcation scan with
branch-point detection.
"""

from __future__ import annotations

import functools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .fixed import FIXED_SCHEMES, DivergenceError, FixedStepSettings, IntegrationError, Trajectory, _all_finite, \
    _grow, _grow1, integrate, step_kernel
from .models import DiseaseParams, HhtOdeSystem, ModelError, disease_jacobian, disease_system, sigmoid_activation

BRACKET = (-200.0, 600.0)
DIRECTIONS = {"up": 1, "down": -1, "both": 0}


class AnalysisError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# fixed points


def _channels(p: DiseaseParams):
    # (weight, reversal, delta, xtilde, power) for he, hi, le, li
    return (
        (p.w_he, p.x_he, p.delta_he, p.xtilde_he, 1),
        (p.w_hi, p.x_hi, p.delta_hi, p.xtilde_hi, 2),
        (p.w_le, p.x_le, p.delta_le, p.xtilde_le, 1),
        (p.w_li, p.x_li, p.delta_li, p.xtilde_li, 1),
    )


def fixed_point_residual(x, S: float, p: DiseaseParams | None = None):
    """``g(x; S)``: the observable equation with every activation at equilibrium.

    Works elementwise on arrays.  The ``hi`` activation enters squared.
    """
    p = p or DiseaseParams()
    x = np.asarray(x, dtype=float)
    g = -x + S
    for w, xr, delta, xt, power in _channels(p):
        g = g - sigmoid_activation(x, delta, xt) ** power * w * (x - xr)
    return g if g.ndim else float(g)


def fixed_point_residual_derivative(x, p: DiseaseParams | None = None):
    """``dg/dx`` (independent of S)."""
    p = p or DiseaseParams()
    x = np.asarray(x, dtype=float)
    dg = -np.ones_like(x)
    for w, xr, delta, xt, power in _channels(p):
        F = sigmoid_activation(x, delta, xt)
        dF = delta * F * (1.0 - F)
        dg = dg - w * (power * F ** (power - 1) * dF * (x - xr) + F ** power)
    return dg if dg.ndim else float(dg)


@dataclass(frozen=True)
class FixedPointResult:
    S: float
    x_star: float
    a_star: np.ndarray
    eigenvalues: np.ndarray
    residual: float
    iterations: int = 0

    @property
    def max_real_part(self) -> float:
        return float(np.max(self.eigenvalues.real))

    @property
    def state(self) -> np.ndarray:
        return np.r_[self.x_star, self.a_star]

    def n_complex(self, tol: float = 1e-9) -> int:
        scale = max(1.0, float(np.max(np.abs(self.eigenvalues))))
        return int(np.sum(np.abs(self.eigenvalues.imag) > tol * scale))


def count_sign_changes(S: float, p: DiseaseParams | None = None, n: int = 8001, bracket=BRACKET) -> int:
    """Number of sign changes of ``g`` on a uniform grid over ``bracket``."""
    xs = np.linspace(bracket[0], bracket[1], n)
    s = np.sign(fixed_point_residual(xs, S, p))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def is_monotone_decreasing(S: float, p: DiseaseParams | None = None, lo=-100.0, hi=200.0, n: int = 3001) -> bool:
    g = fixed_point_residual(np.linspace(lo, hi, n), S, p)
    return bool(np.all(np.diff(g) < 0))


def solve_fixed_point(S: float, p: DiseaseParams | None = None, tol: float = 1e-10,
                      bracket=BRACKET, max_iter: int = 200) -> FixedPointResult:
    """Root of ``g(x; S)`` by safeguarded Newton-Raphson on ``bracket``.

    Newton steps that leave the current bracket are replaced by bisection.
    Eigenvalues are those of the analytic Jacobian at ``(x*, F(x*))``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    p = (p or DiseaseParams()).with_S(S)
    lo, hi = map(float, bracket)
    glo, ghi = fixed_point_residual(lo, S, p), fixed_point_residual(hi, S, p)
    if glo == 0:
        hi = lo
    elif ghi == 0:
        lo = hi
    elif np.sign(glo) == np.sign(ghi):
        raise AnalysisError(f"no sign change of the fixed-point residual on [{lo}, {hi}] for S={S}")
    x = 0.5 * (lo + hi)
    it = 0
    for it in range(1, max_iter + 1):
        g = fixed_point_residual(x, S, p)
        if abs(g) <= 1e-3 * tol:
            break
        if np.sign(g) == np.sign(glo):
            lo, glo = x, g
        else:
            hi = x
        dg = fixed_point_residual_derivative(x, p)
        x_new = x - g / dg if dg != 0 else np.nan
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if x_new == x:
            break
        x = x_new
    g = fixed_point_residual(x, S, p)
    a = np.array([sigmoid_activation(x, p.delta_hi, p.xtilde_hi),
                  sigmoid_activation(x, p.delta_le, p.xtilde_le),
                  sigmoid_activation(x, p.delta_li, p.xtilde_li)])
    eig = np.linalg.eigvals(disease_jacobian(np.r_[x, a], p))
    eig = eig[np.lexsort((-eig.imag, -eig.real))]
    return FixedPointResult(float(S), float(x), a, eig, float(abs(g)), it)


@dataclass
class EigenSweep:
    """Fixed points over a grid of S with the detected transitions.

    ``sign_changes`` holds ``(S_left, S_right)`` pairs between which the
    largest real part changes sign; ``complex_transitions`` holds
    ``(S_left, S_right, n_left, n_right)`` where the number of non-real
    eigenvalues changes.
    """

    points: list[FixedPointResult]
    sign_changes: list[tuple[float, float]] = field(default_factory=list)
    complex_transitions: list[tuple[float, float, int, int]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, k):
        return self.points[k]


def s_grid(s_min: float, s_max: float, step: float) -> np.ndarray:
    if not step > 0:
        raise ValueError("S step must be positive")
    if s_max < s_min:
        raise ValueError("s_max must not be below s_min")
    n = int(math.floor((s_max - s_min) / step * (1 + 1e-12) + 1e-9))
    return np.round(s_min + step * np.arange(n + 1), 12)


def eigenvalue_sweep(s_min: float, s_max: float, step: float, p: DiseaseParams | None = None,
                     tol: float = 1e-10) -> EigenSweep:
    points = [solve_fixed_point(S, p, tol) for S in s_grid(s_min, s_max, step)]
    sweep = EigenSweep(points)
    for a, b in zip(points, points[1:]):
        if np.sign(a.max_real_part) != np.sign(b.max_real_part):
            sweep.sign_changes.append((a.S, b.S))
        if a.n_complex() != b.n_complex():
            sweep.complex_transitions.append((a.S, b.S, a.n_complex(), b.n_complex()))
    return sweep


# --------------------------------------------------------------------------
# Lyapunov spectrum


@dataclass(frozen=True)
class LyapunovResult:
    S: float
    exponents: np.ndarray
    horizon: float
    transient: float
    mean_trace: float
    dt: float = 0.01

    @property
    def max_exponent(self) -> float:
        return float(self.exponents[0])


@functools.lru_cache(maxsize=None)
def _lyapunov_kernel(kernels):
    step = step_kernel(kernels, "icn")
    jac = kernels.jac

    @njit(cache=True, nogil=True)
    def run(u0, dt, n_transient, n_total, renorm, p, src, eps, max_i, max_j):
        d = u0.size
        u = u0.copy()
        for _ in range(n_transient):
            u, _i, _ok = step(u, dt, p, src, eps, max_i, max_j)
            if not _all_finite(u):
                return np.zeros(d), 0.0, 1
        Q = np.eye(d)
        sums = np.zeros(d)
        trace_sum = 0.0
        eye = np.eye(d)
        J0 = jac(u, p)
        n_avg = n_total - n_transient
        for k in range(n_avg):
            new, _i, _ok = step(u, dt, p, src, eps, max_i, max_j)
            if not _all_finite(new):
                return sums, trace_sum, 1
            J1 = jac(new, p)
            # linearised trapezoidal map for the tangent vectors
            Q = np.ascontiguousarray(np.linalg.solve(eye - 0.5 * dt * J1, (eye + 0.5 * dt * J0) @ Q))
            trace_sum += 0.5 * (np.trace(J0) + np.trace(J1))
            u = new
            J0 = J1
            if (k + 1) % renorm == 0 or k == n_avg - 1:
                Q, R = np.linalg.qr(Q)
                Q = np.ascontiguousarray(Q)
                for i in range(d):
                    r = R[i, i]
                    if r < 0.0:
                        Q[:, i] = -Q[:, i]
                        r = -r
                    sums[i] += math.log(r)
        return sums, trace_sum / n_avg, 0

    return run


def lyapunov_spectrum(system: HhtOdeSystem, S: float | None = None, horizon: float = 20000.0,
                      transient: float = 500.0, renorm_interval: float = 1.0, dt: float = 0.01,
                      u0=None, eps_fp: float = 1e-7, max_iter: int = 10) -> LyapunovResult:
    """Lyapunov exponents by the Benettin/QR method.

    The state is advanced with ICN and the tangent basis, started as the
    identity once the transient ``[0, transient)`` has been discarded, with
    the linearised trapezoidal map built from the analytic Jacobian.  The
    basis is re-orthonormalised every ``renorm_interval`` time units.
    ``S`` rebuilds a disease-model system at that input level.
    """
    if not horizon > transient:
        raise ValueError("horizon must exceed transient")
    if transient < 0 or not dt > 0 or not renorm_interval > 0:
        raise ValueError("transient must be non-negative, dt and renorm_interval positive")
    if S is not None:
        if system.name != "disease":
            raise ValueError("S only applies to the disease model")
        system = disease_system(system.model_params, S=S)
    S_val = float(system.model_params.S) if system.name == "disease" else float("nan")
    u0 = np.zeros(system.dimension) if u0 is None else np.asarray(u0, dtype=np.float64)
    n_tr = int(round(transient / dt))
    n_tot = int(round(horizon / dt))
    renorm = max(1, int(round(renorm_interval / dt)))
    run = _lyapunov_kernel(system.kernels)
    sums, mean_trace, status = run(u0, float(dt), n_tr, n_tot, renorm, system.params, system.source,
                                   float(eps_fp), int(max_iter), int(max_iter))
    if status:
        raise DivergenceError("lyapunov: non-finite state")
    exps = np.sort(sums / ((n_tot - n_tr) * dt))[::-1]
    return LyapunovResult(S_val, exps, float(horizon), float(transient), float(mean_trace), float(dt))


# --------------------------------------------------------------------------
# Poincare sections and interspike intervals


@dataclass(frozen=True)
class PoincareCrossing:
    S: float
    t: float
    state: np.ndarray
    direction: int


def _direction_code(direction) -> int:
    if isinstance(direction, str):
        try:
            return DIRECTIONS[direction]
        except KeyError:
            raise ValueError(f"direction must be one of {', '.join(DIRECTIONS)}") from None
    return int(direction)


def crossing_arrays(times, states, offset: float = 40.0, direction="up"):
    """Vectorised section: ``(t, states, signs)`` arrays of interpolated crossings."""
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    code = _direction_code(direction)
    d = states[:, 0] - offset
    d0, d1 = d[:-1], d[1:]
    up = (d0 < 0) & (d1 >= 0)
    down = (d0 > 0) & (d1 <= 0)
    mask = up if code > 0 else down if code < 0 else up | down
    idx = np.flatnonzero(mask)
    theta = d0[idx] / (d0[idx] - d1[idx])
    t = times[idx] + theta * (times[idx + 1] - times[idx])
    u = states[idx] + theta[:, None] * (states[idx + 1] - states[idx])
    u[:, 0] = offset
    return t, u, np.where(up[idx], 1, -1)


def poincare_crossings(traj: Trajectory, offset: float = 40.0, direction="up",
                       S: float = float("nan")) -> list[PoincareCrossing]:
    """Crossings of the plane ``x = offset`` between consecutive samples.

    Crossing time and state are obtained by linear interpolation.  The
    default direction is upward (x increasing through the plane).
    """
    if len(traj.times) == 0:
        raise ValueError("trajectory is empty")
    t, u, sgn = crossing_arrays(traj.times, traj.states, offset, direction)
    return [PoincareCrossing(S, float(ti), ui, int(si)) for ti, ui, si in zip(t, u, sgn)]


def isi_distribution(crossings) -> np.ndarray:
    """Differences of consecutive crossing times (crossings or plain times)."""
    times = [c.t if isinstance(c, PoincareCrossing) else c for c in crossings]
    if len(times) < 2:
        return np.empty(0)
    return np.diff(np.asarray(times, dtype=float))


# --------------------------------------------------------------------------
# bifurcation scan


@functools.lru_cache(maxsize=None)
def _section_kernel(kernels, scheme):
    # integrates without storing the trajectory and keeps only the crossings
    step = step_kernel(kernels, scheme)

    @njit(cache=True, nogil=True)
    def run(u0, dt, n, k_start, offset, code, p, src, eps, max_i, max_j):
        d = u0.size
        ts = np.empty(64)
        ys = np.empty((64, d))
        m = 0
        u = u0.copy()
        for k in range(n):
            new, _i, _ok = step(u, dt, p, src, eps, max_i, max_j)
            if not _all_finite(new):
                return ts[:m], ys[:m], k + 1
            if k >= k_start:
                d0 = u[0] - offset
                d1 = new[0] - offset
                hit = False
                if code >= 0 and d0 < 0.0 and d1 >= 0.0:
                    hit = True
                if code <= 0 and d0 > 0.0 and d1 <= 0.0:
                    hit = True
                if hit:
                    theta = d0 / (d0 - d1)
                    ts = _grow1(ts, m + 1)
                    ys = _grow(ys, m + 1)
                    ts[m] = (k + theta) * dt
                    ys[m] = u + theta * (new - u)
                    ys[m, 0] = offset
                    m += 1
            u = new
        return ts[:m], ys[:m], -1

    return run


@dataclass
class BifurcationDiagram:
    S: np.ndarray
    crossing_times: list[np.ndarray]
    crossing_states: list[np.ndarray]
    errors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def isis(self) -> list[np.ndarray]:
        return [isi_distribution(t) for t in self.crossing_times]

    def isi_rows(self):
        for S, isi in zip(self.S, self.isis):
            for v in isi:
                yield float(S), float(v)

    def poincare_rows(self):
        for S, t, u in zip(self.S, self.crossing_times, self.crossing_states):
            for ti, ui in zip(t, u):
                yield (float(S), float(ti), *map(float, ui))


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("HHT_LAB_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return int(threads)


def _section_one(S, solver, params, horizon, transient, offset, dt, eps_fp, max_iter, direction):
    system = disease_system(params, S=S)
    u0 = np.zeros(system.dimension)
    code = _direction_code(direction)
    if solver in FIXED_SCHEMES:
        n = FixedStepSettings(dt=dt, T=horizon).n_steps
        # the crossing in step k lies in [k dt, (k+1) dt]
        k_start = int(math.ceil(transient / dt - 1e-9))
        run = _section_kernel(system.kernels, solver)
        t, u, fail = run(u0, float(dt), n, k_start, float(offset), code, system.params, system.source,
                         float(eps_fp), int(max_iter), int(max_iter))
        if fail >= 0:
            raise DivergenceError(f"{solver}: non-finite state at t={fail * dt:g}")
        return t, u
    if solver == "rk45-baseline":
        traj = integrate(system, solver, u0, FixedStepSettings(dt=dt, T=horizon))
    else:
        from .control import AdaptiveSettings, integrate_adaptive

        traj = integrate_adaptive(system, solver, u0,
                                  AdaptiveSettings(T=horizon, dt0=dt, eps_fp=eps_fp,
                                                   max_iter_I=max_iter, max_iter_J=max_iter))
    sub = traj.after(transient)
    t, u, _ = crossing_arrays(sub.times, sub.states, offset, code)
    return t, u


def bifurcation_sweep(S_values, solver: str = "icn", horizon: float = 10000.0, transient: float = 500.0,
                      offset: float = 40.0, dt: float = 0.01, params: DiseaseParams | None = None,
                      eps_fp: float = 1e-7, max_iter: int = 10, threads: int | None = None,
                      direction="up") -> BifurcationDiagram:
    """Post-transient plane crossings for each S, integrating from the zero state.

    Work is spread over ``threads`` worker threads (compiled kernels release
    the GIL); results are ordered by S.  A failing S is recorded in
    ``errors`` and leaves empty crossings.
    """
    S_values = np.asarray(S_values, dtype=float)
    if S_values.size > 1 and np.any(np.diff(S_values) <= 0):
        raise ValueError("S values must be strictly increasing")
    if not horizon > transient:
        raise ValueError("horizon must exceed transient")
    params = params or DiseaseParams()
    threads = resolve_threads(threads)
    job = functools.partial(_section_one, solver=solver, params=params, horizon=horizon, transient=transient,
                            offset=offset, dt=dt, eps_fp=eps_fp, max_iter=max_iter, direction=direction)

    def safe(S):
        try:
            return job(S), None
        except (IntegrationError, ModelError, ValueError) as exc:
            return (np.empty(0), np.empty((0, 4))), str(exc)

    if threads == 1 or S_values.size <= 1:
        out = [safe(S) for S in S_values]
    else:
        # compile once before fanning out
        safe(S_values[0])
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(safe, S_values))
    diagram = BifurcationDiagram(S_values, [o[0][0] for o in out], [o[0][1] for o in out],
                                 meta=dict(solver=solver, horizon=horizon, transient=transient, offset=offset,
                                           dt=dt, direction=direction))
    for S, (_, err) in zip(S_values, out):
        if err is not None:
            diagram.errors[float(S)] = err
    return diagram


# --------------------------------------------------------------------------
# branch points


def count_clusters(values, cluster_tol: float = 0.5) -> int:
    """Number of single-linkage clusters at absolute threshold ``cluster_tol``.

    In one dimension single linkage reduces to splitting the sorted values
    wherever consecutive gaps exceed the threshold.
    """
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return 0
    return int(1 + np.count_nonzero(np.diff(v) > cluster_tol))


@dataclass(frozen=True)
class BranchPoint:
    S: float
    before: int
    after: int

    @property
    def kind(self) -> str:
        if self.before > 0 and self.after == 2 * self.before:
            return "doubling"
        if self.after > 0 and self.before == 2 * self.after:
            return "halving"
        return "increase" if self.after > self.before else "decrease"

    @property
    def grows(self) -> bool:
        return self.after > self.before


@dataclass
class BranchReport:
    """Cluster counts per S and the S values where they change.

    ``doubling_cascade`` is the first run of three consecutive, chained
    count increases; ``halving_cascade`` the last run of three chained
    decreases.
    """

    counts: np.ndarray
    S: np.ndarray
    points: list[BranchPoint]
    doubling_cascade: tuple[float, ...] = ()
    halving_cascade: tuple[float, ...] = ()

    @property
    def feigenbaum_ratio(self) -> float | None:
        b = self.doubling_cascade
        return feigenbaum_ratio(*b) if len(b) == 3 else None

    @property
    def halving_ratio(self) -> float | None:
        # read from high S downwards the halvings are doublings again
        b = self.halving_cascade
        return feigenbaum_ratio(*b[::-1]) if len(b) == 3 else None


def feigenbaum_ratio(b1: float, b2: float, b3: float) -> float:
    """``(b2 - b1) / (b3 - b2)`` for three successive branch points."""
    if b3 == b2:
        raise ValueError("coincident branch points")
    return (b2 - b1) / (b3 - b2)


def _cascades(points, length=3):
    runs = {True: [], False: []}
    for i in range(len(points) - length + 1):
        run = points[i:i + length]
        grows = run[0].grows
        if all(bp.grows == grows for bp in run) and all(a.after == b.before for a, b in zip(run, run[1:])):
            runs[grows].append(tuple(bp.S for bp in run))
    up = runs[True][0] if runs[True] else ()
    down = runs[False][-1] if runs[False] else ()
    return up, down


def detect_branch_points(diagram_or_S, isis=None, cluster_tol: float = 0.5) -> BranchReport:
    """Report every S at which the number of ISI clusters changes.

    Accepts a :class:`BifurcationDiagram` or a pair ``(S values, ISI lists)``.
    A branch point is attributed to the first S carrying the new count.
    A cascade is a run of three consecutive branch points that all raise (or
    all lower) the count and chain, e.g. ``1 -> 2 -> 4 -> 8``.  Plain
    increases count as well as exact doublings: when a period doubling
    splits one ISI branch by more than ``cluster_tol`` but another by less,
    the count rises by one rather than doubling.
    """
    if isinstance(diagram_or_S, BifurcationDiagram):
        S, isis = diagram_or_S.S, diagram_or_S.isis
    else:
        S = np.asarray(diagram_or_S, dtype=float)
    if len(S) != len(isis):
        raise ValueError("S values and ISI lists differ in length")
    counts = np.array([count_clusters(v, cluster_tol) for v in isis], dtype=int)
    points = [BranchPoint(float(S[k]), int(counts[k - 1]), int(counts[k]))
              for k in range(1, len(S)) if counts[k] != counts[k - 1]]
    up, down = _cascades(points)
    return BranchReport(counts, np.asarray(S, dtype=float), points, up, down)

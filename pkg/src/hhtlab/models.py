"""Hodgkin-Huxley type (HHT) systems.

Every built-in model is written in the split form

    du/dt = F1(u) + F2(u) + S

where ``F1`` only acts on the observable component ``u[0]``, ``F2`` only on
the activation block ``u[1:]`` and ``S`` is a constant source on the
observable.  The activation block of all built-in models is affine in the
activations, ``f2(x, a) = c(x) + d(x) * a`` with diagonal ``d``, which is what
the semi-implicit schemes exploit for closed-form solves.

Model right-hand sides are compiled with numba so that the integrators in
:mod:`hhtlab.fixed` and :mod:`hhtlab.control` can call them from compiled
loops.  Parameters travel into the kernels as flat float arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from numba import njit


class ModelError(ValueError):
    """Invalid model parameters or state."""


# --------------------------------------------------------------------------
# sigmoid


@njit(cache=True)
def _sigmoid(x, delta, xtilde):
    z = -delta * (x - xtilde)
    if z > 0.0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def sigmoid_activation(x, delta: float, xtilde: float):
    """Logistic activation ``1 / (1 + exp(-delta * (x - xtilde)))``.

    Evaluated in an overflow-free form, so extreme arguments saturate to 0
    or 1.  Accepts scalars or arrays.
    """
    x = np.asarray(x, dtype=float)
    z = -delta * (x - xtilde)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z > 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class DiseaseParams:
    """Parameters of the four-dimensional disease dynamics model.

    The fast excitatory activation has zero time constant and is therefore
    not a state component; it is replaced by ``F_he(x)`` everywhere.
    """

    tau_x: float = 10.0
    tau_hi: float = 2.0
    tau_le: float = 10.0
    tau_li: float = 50.0
    w_he: float = 15.0
    w_hi: float = 20.0
    w_le: float = 3.0
    w_li: float = 18.0
    # excitatory channels reverse at 110, inhibitory ones at -30
    x_he: float = 110.0
    x_hi: float = -30.0
    x_le: float = 110.0
    x_li: float = -30.0
    delta_he: float = 0.25
    delta_hi: float = 0.25
    delta_le: float = 0.25
    delta_li: float = 0.25
    xtilde_he: float = 35.0
    xtilde_hi: float = 35.0
    xtilde_le: float = 20.0
    xtilde_li: float = 20.0
    S: float = 0.0

    def __post_init__(self):
        for name in ("tau_x", "tau_hi", "tau_le", "tau_li"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)!r}")
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ModelError(f"{f.name} must be finite")

    @classmethod
    def as_printed(cls, **overrides) -> "DiseaseParams":
        """Reversal levels grouped by time scale (x_le = x_li = -30, x_he = x_hi = 110).

        This grouping gives a non-monotone fixed-point equation with several
        equilibria and no oscillations; it is kept for comparison only.
        """
        values = dict(x_he=110.0, x_hi=110.0, x_le=-30.0, x_li=-30.0)
        values.update(overrides)
        return cls(**values)

    def with_S(self, S: float) -> "DiseaseParams":
        return _replace(self, S=float(S))

    def packed(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @property
    def activation_time_constants(self) -> tuple[float, float, float]:
        return (self.tau_hi, self.tau_le, self.tau_li)


@dataclass(frozen=True)
class VdpParams:
    mu: float = 1.0

    def packed(self) -> np.ndarray:
        return np.array([self.mu], dtype=np.float64)


@dataclass(frozen=True)
class FhnParams:
    a: float = 0.1
    b: float = 0.01
    c: float = 0.02
    I: float = 0.0

    def packed(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.I], dtype=np.float64)


@dataclass(frozen=True)
class HhParams:
    """Squid axon parameters in the 1952 convention (rest potential at 0 mV)."""

    C: float = 1.0
    gbar_K: float = 36.0
    gbar_Na: float = 120.0
    g_L: float = 0.3
    E_K: float = -12.0
    E_Na: float = 115.0
    E_L: float = 10.613
    I: float = 0.0

    def __post_init__(self):
        if not self.C > 0:
            raise ModelError("C must be positive")

    def packed(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)


def _replace(obj, **changes):
    values = asdict(obj)
    values.update(changes)
    return type(obj)(**values)


PARAM_TYPES = {"disease": DiseaseParams, "vdp": VdpParams, "fhn": FhnParams, "hh": HhParams}


def params_from_mapping(model: str, mapping: dict | None = None):
    """Build a parameter record; absent keys keep their defaults, unknown keys raise."""
    try:
        cls = PARAM_TYPES[model]
    except KeyError:
        raise ModelError(f"unknown model {model!r}; valid: {', '.join(PARAM_TYPES)}") from None
    mapping = dict(mapping or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ModelError(f"unknown {model} parameter(s): {', '.join(unknown)}")
    return cls(**{k: float(v) for k, v in mapping.items()})


def load_params(path: str | Path, model: str = "disease"):
    """Read a JSON parameter document whose keys are parameter field names."""
    with open(path) as fh:
        return params_from_mapping(model, json.load(fh))


# --------------------------------------------------------------------------
# disease model kernels
#
# packed layout follows the DiseaseParams field order:
#  0 tau_x  1 tau_hi  2 tau_le  3 tau_li
#  4 w_he   5 w_hi    6 w_le    7 w_li
#  8 x_he   9 x_hi   10 x_le   11 x_li
# 12-15 delta_{he,hi,le,li}   16-19 xtilde_{he,hi,le,li}   20 S


@njit(cache=True)
def _disease_f1(u, p):
    x = u[0]
    a_he = _sigmoid(x, p[12], p[16])
    r = (-x
         - a_he * p[4] * (x - p[8])
         - u[2] * p[6] * (x - p[10])
         - u[3] * p[7] * (x - p[11])
         - u[1] * u[1] * p[5] * (x - p[9]))
    return r / p[0]


@njit(cache=True)
def _disease_coeffs(x, p):
    c = np.empty(3)
    d = np.empty(3)
    for k in range(3):
        tau = p[1 + k]
        c[k] = _sigmoid(x, p[13 + k], p[17 + k]) / tau
        d[k] = -1.0 / tau
    return c, d


@njit(cache=True)
def _disease_jac(u, p):
    x = u[0]
    tx = p[0]
    J = np.zeros((4, 4))
    a_he = _sigmoid(x, p[12], p[16])
    dahe = p[12] * a_he * (1.0 - a_he)
    J[0, 0] = -(1.0 + dahe * p[4] * (x - p[8]) + a_he * p[4]
                + u[1] * u[1] * p[5] + u[2] * p[6] + u[3] * p[7]) / tx
    J[0, 1] = -2.0 * u[1] * p[5] * (x - p[9]) / tx
    J[0, 2] = -p[6] * (x - p[10]) / tx
    J[0, 3] = -p[7] * (x - p[11]) / tx
    for k in range(3):
        F = _sigmoid(x, p[13 + k], p[17 + k])
        tau = p[1 + k]
        J[1 + k, 0] = p[13 + k] * F * (1.0 - F) / tau
        J[1 + k, 1 + k] = -1.0 / tau
    return J


# --------------------------------------------------------------------------
# Van der Pol: observable x1, activation x2


@njit(cache=True)
def _vdp_f1(u, p):
    return u[1]


@njit(cache=True)
def _vdp_coeffs(x, p):
    c = np.empty(1)
    d = np.empty(1)
    c[0] = -x
    d[0] = p[0] * (1.0 - x * x)
    return c, d


@njit(cache=True)
def _vdp_jac(u, p):
    J = np.zeros((2, 2))
    J[0, 1] = 1.0
    J[1, 0] = -2.0 * p[0] * u[0] * u[1] - 1.0
    J[1, 1] = p[0] * (1.0 - u[0] * u[0])
    return J


# --------------------------------------------------------------------------
# FitzHugh-Nagumo: observable V, activation w; p = (a, b, c, I)


@njit(cache=True)
def _fhn_f1(u, p):
    V = u[0]
    return V * (p[0] - V) * (V - 1.0) - u[1]


@njit(cache=True)
def _fhn_coeffs(x, p):
    c = np.empty(1)
    d = np.empty(1)
    c[0] = p[1] * x
    d[0] = -p[2]
    return c, d


@njit(cache=True)
def _fhn_jac(u, p):
    V = u[0]
    J = np.zeros((2, 2))
    # d/dV of V(a-V)(V-1) = -3V^2 + 2(1+a)V - a
    J[0, 0] = -3.0 * V * V + 2.0 * (1.0 + p[0]) * V - p[0]
    J[0, 1] = -1.0
    J[1, 0] = p[1]
    J[1, 1] = -p[2]
    return J


# --------------------------------------------------------------------------
# Hodgkin-Huxley 1952; state (V, n, m, h); p = (C, gK, gNa, gL, EK, ENa, EL, I)

_SINGULAR_EPS = 1e-7


@njit(cache=True)
def _exprel_rate(scale, y):
    # scale * y / (exp(y / 10) - 1), with the limit 10 * scale at y = 0
    z = y / 10.0
    if abs(z) < _SINGULAR_EPS:
        return scale * 10.0 / (1.0 + 0.5 * z)
    return scale * y / math.expm1(z)


@njit(cache=True)
def _hh_rates(V):
    an = _exprel_rate(0.01, 10.0 - V)
    bn = 0.125 * math.exp(-V / 80.0)
    am = _exprel_rate(0.1, 25.0 - V)
    bm = 4.0 * math.exp(-V / 18.0)
    ah = 0.07 * math.exp(-V / 20.0)
    bh = 1.0 / (math.exp((30.0 - V) / 10.0) + 1.0)
    return an, bn, am, bm, ah, bh


@njit(cache=True)
def _hh_check(u):
    for k in range(1, 4):
        if not (-0.1 <= u[k] <= 1.1):
            raise ValueError("gating variable outside [-0.1, 1.1]; state is corrupted")


@njit(cache=True)
def _hh_f1(u, p):
    _hh_check(u)
    V, n, m, h = u[0], u[1], u[2], u[3]
    return (-p[1] * n ** 4 * (V - p[4]) - p[2] * m ** 3 * h * (V - p[5]) - p[3] * (V - p[6])) / p[0]


@njit(cache=True)
def _hh_coeffs(x, p):
    an, bn, am, bm, ah, bh = _hh_rates(x)
    c = np.empty(3)
    d = np.empty(3)
    # (y_inf - y) / tau_y = alpha - (alpha + beta) y
    c[0] = an
    c[1] = am
    c[2] = ah
    d[0] = -(an + bn)
    d[1] = -(am + bm)
    d[2] = -(ah + bh)
    return c, d


# --------------------------------------------------------------------------
# generic kernel assembly


class ModelKernels(NamedTuple):
    """Compiled building blocks of one model family.

    ``rhs(u, p, src)`` is the full vector field, ``act_solve(a_base, x, h, p,
    eps, max_iter)`` returns the solution ``a`` of ``a = a_base + h * f2(x, a)``
    together with the inner iteration count, and ``jac(u, p)`` the Jacobian
    (finite differences when no analytic one was supplied).
    """

    f1: Callable
    f2: Callable
    rhs: Callable
    act_solve: Callable
    jac: Callable
    linear: bool


def build_kernels(f1, coeffs=None, f2=None, jac=None) -> ModelKernels:
    """Assemble the kernel set for a model.

    Supply ``coeffs(x, p) -> (c, d)`` for an activation block that is affine
    in the activations (closed-form implicit solves), or a general
    ``f2(u, p)`` otherwise (implicit solves fall back to fixed-point
    iteration).  All callables must be numba-compiled.
    """
    if coeffs is None and f2 is None:
        raise ModelError("either coeffs or f2 is required")
    linear = coeffs is not None

    if linear:
        @njit(cache=True)
        def f2_kernel(u, p):
            c, d = coeffs(u[0], p)
            return c + d * u[1:]

        @njit(cache=True)
        def act_solve(a_base, x, h, p, eps, max_iter):
            c, d = coeffs(x, p)
            return (a_base + h * c) / (1.0 - h * d), 1, True
    else:
        f2_kernel = f2

        @njit(cache=True)
        def act_solve(a_base, x, h, p, eps, max_iter):
            u = np.empty(a_base.size + 1)
            u[0] = x
            u[1:] = a_base
            k = 0
            ok = False
            while k < max_iter:
                k += 1
                a_new = a_base + h * f2_kernel(u, p)
                diff = np.sqrt(np.sum((a_new - u[1:]) ** 2))
                u[1:] = a_new
                if diff <= eps:
                    ok = True
                    break
            return u[1:].copy(), k, ok

    @njit(cache=True)
    def rhs(u, p, src):
        out = np.empty(u.size)
        out[0] = f1(u, p) + src
        if u.size > 1:
            out[1:] = f2_kernel(u, p)
        return out

    if jac is None:
        @njit(cache=True)
        def jac_kernel(u, p):
            n = u.size
            J = np.empty((n, n))
            for j in range(n):
                h = 1e-6 * max(1.0, abs(u[j]))
                up = u.copy()
                um = u.copy()
                up[j] += h
                um[j] -= h
                J[:, j] = (rhs(up, p, 0.0) - rhs(um, p, 0.0)) / (2.0 * h)
            return J
    else:
        jac_kernel = jac

    return ModelKernels(f1, f2_kernel, rhs, act_solve, jac_kernel, linear)


# diagonal linear system u_k' = r_k u_k; p holds the rates
@njit(cache=True)
def _lin_f1(u, p):
    return p[0] * u[0]


@njit(cache=True)
def _lin_coeffs(x, p):
    return np.zeros(p.size - 1), p[1:].copy()


@njit(cache=True)
def _lin_jac(u, p):
    return np.diag(p.copy())


DISEASE_KERNELS = build_kernels(_disease_f1, coeffs=_disease_coeffs, jac=_disease_jac)
VDP_KERNELS = build_kernels(_vdp_f1, coeffs=_vdp_coeffs, jac=_vdp_jac)
FHN_KERNELS = build_kernels(_fhn_f1, coeffs=_fhn_coeffs, jac=_fhn_jac)
HH_KERNELS = build_kernels(_hh_f1, coeffs=_hh_coeffs)
LINEAR_KERNELS = build_kernels(_lin_f1, coeffs=_lin_coeffs, jac=_lin_jac)


# --------------------------------------------------------------------------
# system object


@dataclass(frozen=True, eq=False)
class HhtOdeSystem:
    """A model instance: compiled kernels plus concrete parameter values.

    Instances are immutable and can be shared between threads.
    """

    name: str
    kernels: ModelKernels
    params: np.ndarray
    source: float
    labels: tuple[str, ...]
    activation_time_constants: tuple[float, ...] = ()
    model_params: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        params = np.ascontiguousarray(self.params, dtype=np.float64)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "source", float(self.source))

    @property
    def dimension(self) -> int:
        return len(self.labels)

    @property
    def linear_activation(self) -> bool:
        return self.kernels.linear

    def _state(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.dimension,):
            raise ModelError(f"{self.name} state must have shape ({self.dimension},), got {u.shape}")
        return u

    def rhs(self, u) -> np.ndarray:
        return self.kernels.rhs(self._state(u), self.params, self.source)

    def split(self, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(F1(u), F2(u), S)``, each a full-length vector."""
        u = self._state(u)
        F1 = np.zeros(self.dimension)
        F1[0] = self.kernels.f1(u, self.params)
        F2 = np.zeros(self.dimension)
        if self.dimension > 1:
            F2[1:] = self.kernels.f2(u, self.params)
        Svec = np.zeros(self.dimension)
        Svec[0] = self.source
        return F1, F2, Svec

    def jacobian(self, u) -> np.ndarray:
        return self.kernels.jac(self._state(u), self.params)

    def activation_update(self, a_n, x_eval: float, dt_eff: float, eps: float = 1e-12, max_iter: int = 1000):
        """Solve ``a = a_n + dt_eff * f2(x_eval, a)`` for the activation block."""
        if dt_eff < 0:
            raise ModelError("dt_eff must be non-negative")
        a_n = np.asarray(a_n, dtype=np.float64)
        a, _, _ = self.kernels.act_solve(a_n, float(x_eval), float(dt_eff), self.params, eps, max_iter)
        return a


def disease_system(params: DiseaseParams | None = None, S: float | None = None) -> HhtOdeSystem:
    params = params or DiseaseParams()
    if S is not None:
        params = params.with_S(S)
    return HhtOdeSystem(
        name="disease",
        kernels=DISEASE_KERNELS,
        params=params.packed(),
        source=params.S / params.tau_x,
        labels=("x", "a_hi", "a_le", "a_li"),
        activation_time_constants=params.activation_time_constants,
        model_params=params,
    )


def vdp_system(params: VdpParams | None = None) -> HhtOdeSystem:
    params = params or VdpParams()
    return HhtOdeSystem("vdp", VDP_KERNELS, params.packed(), 0.0, ("x1", "x2"), model_params=params)


def harmonic_oscillator() -> HhtOdeSystem:
    """Van der Pol with zero damping."""
    return vdp_system(VdpParams(mu=0.0))


def fhn_system(params: FhnParams | None = None) -> HhtOdeSystem:
    params = params or FhnParams()
    return HhtOdeSystem("fhn", FHN_KERNELS, params.packed(), params.I, ("V", "w"), model_params=params)


def hh_system(params: HhParams | None = None) -> HhtOdeSystem:
    params = params or HhParams()
    return HhtOdeSystem("hh", HH_KERNELS, params.packed(), params.I / params.C,
                        ("V", "n", "m", "h"), model_params=params)


def linear_system(rates, source: float = 0.0) -> HhtOdeSystem:
    """Diagonal linear system ``u_k' = rates[k] * u_k`` (plus ``source`` on ``u_0``).

    Handy for checks against closed-form solutions; ``rates`` of length one
    gives an observable-only system without activations.
    """
    rates = np.atleast_1d(np.asarray(rates, dtype=np.float64))
    labels = ("x",) + tuple(f"a{k}" for k in range(1, rates.size))
    return HhtOdeSystem("linear", LINEAR_KERNELS, rates, source, labels)


def make_system(model: str, params=None, **overrides) -> HhtOdeSystem:
    """Construct a built-in system by id (``disease``, ``vdp``, ``fhn``, ``hh``)."""
    if params is None:
        params = params_from_mapping(model, overrides)
    elif overrides:
        params = _replace(params, **overrides)
    builders = {"disease": disease_system, "vdp": vdp_system, "fhn": fhn_system, "hh": hh_system}
    return builders[model](params)


# --------------------------------------------------------------------------
# plain-call helpers for the disease model


def disease_rhs(u, p: DiseaseParams | None = None) -> np.ndarray:
    return disease_system(p).rhs(u)


def disease_jacobian(u, p: DiseaseParams | None = None) -> np.ndarray:
    return disease_system(p).jacobian(u)


def split_rhs(u, p: DiseaseParams | None = None):
    return disease_system(p).split(u)


def implicit_activation_update(a_n, x_eval: float, dt_eff: float, p: DiseaseParams | None = None) -> np.ndarray:
    """Backward-Euler activation step of the disease model.

    Closed form ``(tau * a_n + dt_eff * F(x_eval)) / (tau + dt_eff)``, a convex
    combination of the old activations and their sigmoid targets.
    """
    p = p or DiseaseParams()
    if dt_eff < 0:
        raise ModelError("dt_eff must be non-negative")
    a_n = np.asarray(a_n, dtype=float)
    tau = np.array(p.activation_time_constants)
    F = np.array([
        sigmoid_activation(x_eval, p.delta_hi, p.xtilde_hi),
        sigmoid_activation(x_eval, p.delta_le, p.xtilde_le),
        sigmoid_activation(x_eval, p.delta_li, p.xtilde_li),
    ])
    if math.isinf(dt_eff):
        return F
    return (tau * a_n + dt_eff * F) / (tau + dt_eff)


def vdp_rhs(state, p: VdpParams | None = None) -> np.ndarray:
    return vdp_system(p).rhs(state)


def vdp_energy(state) -> float:
    """Harmonic-oscillator energy ``(x1**2 + x2**2) / 2``; works row-wise on arrays."""
    s = np.asarray(state, dtype=float)
    return 0.5 * (s[..., 0] ** 2 + s[..., 1] ** 2)


def fhn_rhs(state, p: FhnParams | None = None) -> np.ndarray:
    return fhn_system(p).rhs(state)


def hh_rates(V: float) -> dict[str, float]:
    an, bn, am, bm, ah, bh = _hh_rates(float(V))
    return {"alpha_n": an, "beta_n": bn, "alpha_m": am, "beta_m": bm, "alpha_h": ah, "beta_h": bh}


def hh_steady_state(V: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y_inf, tau_y)`` for the gates (n, m, h) at potential ``V``."""
    r = hh_rates(V)
    out_inf, out_tau = [], []
    for g in "nmh":
        s = r[f"alpha_{g}"] + r[f"beta_{g}"]
        out_inf.append(r[f"alpha_{g}"] / s)
        out_tau.append(1.0 / s)
    return np.array(out_inf), np.array(out_tau)


def hh_rhs(state, p: HhParams | None = None) -> np.ndarray:
    return hh_system(p).rhs(state)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hhtlab.control import AdaptiveSettings
from hhtlab.fixed import FixedStepSettings, Trajectory
from hhtlab.metrics import (BenchJob, convergence_study, global_l2_norms, local_l2_derivative_norm,
                            local_l2_state_norm, local_norm_statistics, runtime_benchmark, trapezoid_error)
from hhtlab.models import harmonic_oscillator, linear_system


def traj_from(times, states):
    times = np.asarray(times, float)
    n = len(times)
    return Trajectory(times, np.asarray(states, float), np.zeros(n, int), np.ones(n, bool), np.r_[0, np.diff(times)])


def test_local_norms_by_hand():
    assert local_l2_state_norm([3.0, 4.0], 0.25) == pytest.approx(2.5)
    assert local_l2_derivative_norm([0.0, 0.0], [0.3, 0.4], 0.1) == pytest.approx(math.sqrt(0.1) * 5.0)
    with pytest.raises(ValueError):
        local_l2_state_norm([1.0], 0.0)


def test_global_norms_of_constant_state():
    t = np.linspace(0, 4, 41)
    rep = global_l2_norms(traj_from(t, np.full((41, 2), [3.0, 4.0])))
    # integral of |u|^2 = 25 * 4
    assert rep.global_state_norm == pytest.approx(10.0)
    assert rep.global_derivative_norm == 0.0
    e, v = local_norm_statistics(traj_from(t, np.full((41, 2), [3.0, 4.0])))
    assert e == pytest.approx(5.0 * math.sqrt(0.1)) and v == pytest.approx(0.0, abs=1e-24)


def test_global_norm_of_linear_ramp():
    # u = t on [0, 1]: left rule -> sum of (k h)^2 h, derivative norm exactly 1
    h = 1e-3
    t = np.arange(0, 1 + h / 2, h)
    rep = global_l2_norms(traj_from(t, t[:, None]))
    assert rep.global_state_norm == pytest.approx(math.sqrt(1 / 3), rel=2e-3)
    assert rep.global_derivative_norm == pytest.approx(1.0)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=30))
def test_variable_steps_sum_squares(steps):
    t = np.r_[0.0, np.cumsum(steps)]
    u = np.c_[np.sin(t), np.cos(t)]
    rep = global_l2_norms(traj_from(t, u))
    assert rep.global_state_norm ** 2 == pytest.approx(np.sum(rep.local_state ** 2))
    # |u| = 1 so the squared state norm equals the horizon
    assert rep.global_state_norm ** 2 == pytest.approx(t[-1])
    e, v = local_norm_statistics(traj_from(t, u))
    assert e == pytest.approx(np.mean(np.sqrt(steps))) and v == pytest.approx(np.var(np.sqrt(steps)))


def test_trapezoid_error():
    t = np.linspace(0, 2, 5)
    a = np.c_[t, np.zeros(5)]
    assert trapezoid_error(t, a, np.zeros((5, 2))) == pytest.approx(2.0)


def test_convergence_study_orders_on_exponential():
    system = linear_system([-1.0])
    for scheme, order in (("icn", 2.0), ("mmrk4", 4.0)):
        rep = convergence_study(system, scheme, 0.2, 5, 2.0, eps_fp=1e-13, max_iter=50, u0=[1.0])
        assert rep.order == pytest.approx(order, abs=0.15)
        assert rep.strictly_decreasing
        assert len(rep.errors) == 4 and len(rep.dts) == 5
        rows = list(rep.rows())
        assert rows[0][:2] == (0, 0.2) and math.isnan(rows[-1][2])


def test_convergence_study_exact_mode():
    ho = harmonic_oscillator()
    rep = convergence_study(ho, "icn", 0.1, 4, 5.0, eps_fp=1e-12, max_iter=30, u0=[1.0, 0.0],
                            exact=lambda t: np.c_[np.cos(t), -np.sin(t)])
    assert len(rep.errors) == 4
    assert rep.order == pytest.approx(2.0, abs=0.1)


def test_convergence_study_reports_failure():
    rep = convergence_study(linear_system([40.0]), "mmrk4", 1.0, 4, 100.0, u0=[1.0])
    assert rep.failed_level == 0 and rep.message
    with pytest.raises(ValueError):
        convergence_study(linear_system([-1.0]), "icn", 0.1, 2, 1.0)


def test_benchmark_contract():
    calls = []
    res = runtime_benchmark(lambda: calls.append(1) or len(calls), repetitions=3, keep_outputs=True)
    assert len(calls) == 4 and res.outputs == [2, 3, 4]
    assert res.min <= res.mean <= res.max
    with pytest.raises(ValueError):
        runtime_benchmark(lambda: None, repetitions=2)


def test_bench_job_dispatch():
    system = linear_system([-1.0])
    fixed = BenchJob(system, "icn", np.array([1.0]), FixedStepSettings(dt=0.1, T=1.0))()
    adaptive = BenchJob(system, "aicn", np.array([1.0]), AdaptiveSettings(T=1.0))()
    assert len(fixed) == 11
    assert adaptive.dt_star is not None

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhtlab.models import (DiseaseParams, HhParams, ModelError, VdpParams, disease_system, fhn_system,
                           harmonic_oscillator, hh_steady_state, hh_system, implicit_activation_update,
                           linear_system, make_system, params_from_mapping, sigmoid_activation, vdp_energy,
                           vdp_system)


def reference_rhs(u, p: DiseaseParams):
    """Plain-numpy transcription of the reduced disease model."""
    x, a_hi, a_le, a_li = u

    def F(delta, xt):
        return 1.0 / (1.0 + np.exp(-delta * (x - xt)))

    a_he = F(p.delta_he, p.xtilde_he)
    dx = (-x - a_he * p.w_he * (x - p.x_he) - a_li * p.w_li * (x - p.x_li) - a_le * p.w_le * (x - p.x_le)
          - a_hi ** 2 * p.w_hi * (x - p.x_hi) + p.S) / p.tau_x
    return np.array([
        dx,
        (F(p.delta_hi, p.xtilde_hi) - a_hi) / p.tau_hi,
        (F(p.delta_le, p.xtilde_le) - a_le) / p.tau_le,
        (F(p.delta_li, p.xtilde_li) - a_li) / p.tau_li,
    ])


def fd_jacobian(f, u, h=1e-5):
    J = np.empty((len(u), len(u)))
    for k in range(len(u)):
        e = np.zeros(len(u))
        e[k] = h
        J[:, k] = (f(u + e) - f(u - e)) / (2 * h)
    return J


states = st.tuples(st.floats(-100, 200), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).map(np.array)


def test_sigmoid_midpoint_and_limits():
    assert sigmoid_activation(35.0, 0.25, 35.0) == 0.5
    assert sigmoid_activation(1e6, 0.25, 35.0) == 1.0
    assert sigmoid_activation(-1e6, 0.25, 35.0) == 0.0
    # 1 / (1 + e^-1)
    assert math.isclose(sigmoid_activation(39.0, 0.25, 35.0), 1 / (1 + math.exp(-1)), rel_tol=1e-15)


@given(st.floats(-1e4, 1e4), st.floats(0.01, 5), st.floats(-50, 100))
def test_sigmoid_symmetry(x, delta, xt):
    s = sigmoid_activation(x, delta, xt)
    assert 0.0 <= s <= 1.0
    assert math.isclose(s + sigmoid_activation(2 * xt - x, delta, xt), 1.0, abs_tol=1e-12)


def test_default_reversal_levels_are_grouped_by_sign():
    p = DiseaseParams()
    assert (p.x_he, p.x_le) == (110.0, 110.0)
    assert (p.x_hi, p.x_li) == (-30.0, -30.0)
    q = DiseaseParams.as_printed()
    assert (q.x_he, q.x_hi, q.x_le, q.x_li) == (110.0, 110.0, -30.0, -30.0)


def test_params_validation():
    with pytest.raises(ModelError):
        DiseaseParams(tau_x=0.0)
    with pytest.raises(ModelError):
        DiseaseParams(S=float("nan"))
    with pytest.raises(ModelError, match="unknown disease parameter"):
        params_from_mapping("disease", {"tau_q": 1.0})
    with pytest.raises(ModelError, match="unknown model"):
        params_from_mapping("lorenz", {})
    assert params_from_mapping("disease", {"S": 7}).S == 7.0


@settings(max_examples=50, deadline=None)
@given(states, st.floats(0, 400))
def test_rhs_matches_reference(u, S):
    p = DiseaseParams(S=S)
    np.testing.assert_allclose(disease_system(p).rhs(u), reference_rhs(u, p), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(states)
def test_split_sums_to_rhs(u):
    system = disease_system(S=100.0)
    F1, F2, S = system.split(u)
    np.testing.assert_allclose(F1 + F2 + S, system.rhs(u), rtol=1e-13, atol=1e-13)
    assert np.all(F1[1:] == 0) and F2[0] == 0
    assert S[0] == 10.0


@settings(max_examples=30, deadline=None)
@given(states)
def test_jacobian_matches_central_differences(u):
    system = disease_system(S=50.0)
    J = system.jacobian(u)
    Jfd = fd_jacobian(system.rhs, u)
    assert np.linalg.norm(J - Jfd) <= 1e-6 * max(1.0, np.linalg.norm(J))


def test_state_shape_checked():
    with pytest.raises(ModelError):
        disease_system().rhs(np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).map(np.array),
       st.floats(-100, 200), st.floats(0, 10))
def test_activation_update_solves_implicit_equation(a_n, x, h):
    p = DiseaseParams()
    system = disease_system(p)
    a = system.activation_update(a_n, x, h)
    f2 = system.rhs(np.r_[x, a])[1:]
    np.testing.assert_allclose(a, a_n + h * f2, atol=1e-12)
    np.testing.assert_allclose(a, implicit_activation_update(a_n, x, h, p), atol=1e-14)
    # convex combination keeps activations inside the unit interval
    assert np.all((a >= 0) & (a <= 1))


def test_activation_update_infinite_step_hits_target():
    p = DiseaseParams()
    a = implicit_activation_update([0.3, 0.3, 0.3], 20.0, math.inf, p)
    np.testing.assert_allclose(a, [sigmoid_activation(20.0, 0.25, 35.0), 0.5, 0.5])
    with pytest.raises(ModelError):
        implicit_activation_update([0, 0, 0], 0.0, -1.0, p)


def test_harmonic_oscillator_and_energy():
    ho = harmonic_oscillator()
    np.testing.assert_array_equal(ho.rhs([1.0, 0.0]), [0.0, -1.0])
    np.testing.assert_array_equal(ho.rhs([0.0, 1.0]), [1.0, 0.0])
    assert vdp_energy([3.0, 4.0]) == 12.5
    np.testing.assert_array_equal(vdp_energy(np.array([[1.0, 0.0], [0.0, 2.0]])), [0.5, 2.0])


def test_van_der_pol_damping_term():
    # x1' = x2, x2' = mu (1 - x1^2) x2 - x1
    vdp = vdp_system(VdpParams(mu=2.0))
    np.testing.assert_allclose(vdp.rhs([0.5, 1.0]), [1.0, 2.0 * 0.75 * 1.0 - 0.5])


def test_hh_resting_state_is_equilibrium():
    p = HhParams()
    system = hh_system(p)
    y_inf, tau = hh_steady_state(0.0)
    assert np.all(tau > 0)
    r = system.rhs(np.r_[0.0, y_inf])
    np.testing.assert_allclose(r[1:], 0.0, atol=1e-14)
    # leak reversal is tuned so the rest potential is (nearly) zero
    assert abs(r[0]) < 0.05


def test_hh_removable_singularities_are_finite():
    for V in (10.0, 25.0):
        y_inf, tau = hh_steady_state(V)
        assert np.all(np.isfinite(y_inf)) and np.all(np.isfinite(tau))
    a, b = hh_steady_state(10.0 + 1e-9), hh_steady_state(10.0)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-6)


def test_fhn_jacobian():
    system = fhn_system()
    u = np.array([0.3, 0.05])
    np.testing.assert_allclose(system.jacobian(u), fd_jacobian(system.rhs, u), atol=1e-8)


def test_linear_system_and_make_system():
    lin = linear_system([-1.0, -2.0], source=0.5)
    np.testing.assert_allclose(lin.rhs([1.0, 1.0]), [-0.5, -2.0])
    assert make_system("disease", S=12.0).model_params.S == 12.0
    assert make_system("vdp").dimension == 2
    assert make_system("hh").labels == ("V", "n", "m", "h")

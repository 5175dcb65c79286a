import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpvl1 import f16
from lpvl1.lpv import FunctionMatrix, ParamMatrix
from lpvl1.realize import BaselineLoop, Compensator
from lpvl1.runtime import (CompensatorState, EstimatorState, adapt, compensator_step, control_derivative,
                           control_output, decompose, gate, predictor_derivative, realize_F, upsilon)

from oracles import lti_step_response, scalar_filter_response, upsilon_hp

vec2 = arrays(float, 2, elements=st.floats(-5, 5))
theta2 = arrays(float, 2, elements=st.floats(-1, 1))


@pytest.fixture(scope="module")
def loop():
    model = f16.build_f16_model()
    Kx = ParamMatrix([[1.2, -2.5]], (), ntheta=2)
    return BaselineLoop(model, Kx)


def const(M, k=2):
    return ParamMatrix(np.atleast_2d(M), (), ntheta=k)


# --- predictor ------------------------------------------------------------------

def test_predictor_zero_error(loop):
    th, x = np.array([0.3, -0.4]), np.array([0.1, -0.2])
    out = predictor_derivative(x, x, [0.0], th, np.zeros(2), 10.0, loop)
    np.testing.assert_allclose(out, loop.Am.eval(th) @ x, atol=1e-15)


def test_predictor_pure_decay(loop):
    v = np.array([0.5, -1.5])
    out = predictor_derivative(v, np.zeros(2), [0.0], np.zeros(2), np.zeros(2), 10.0, loop)
    np.testing.assert_allclose(out, -10.0 * v)


@settings(max_examples=40, deadline=None)
@given(vec2, vec2, st.floats(-3, 3), theta2, vec2, st.floats(0.1, 50))
def test_predictor_term_by_term(x_hat, x, u, th, sig, a):
    model = f16.build_f16_model()
    lp = BaselineLoop(model, const([[1.2, -2.5]]))
    A, B = model.A.eval(th), model.B.eval(th)
    Am = A + B @ np.array([[1.2, -2.5]])
    expected = Am @ x + B[:, 0] * u + sig - a * (x_hat - x)
    np.testing.assert_allclose(predictor_derivative(x_hat, x, [u], th, sig, a, lp), expected,
                               rtol=1e-12, atol=1e-10)


# --- estimation law ---------------------------------------------------------------

def test_adapt_zero():
    np.testing.assert_array_equal(adapt(np.zeros(2), 10.0, 1e-3), np.zeros(2))


def test_upsilon_high_precision():
    assert upsilon(10.0, 1e-3) == pytest.approx(upsilon_hp(10.0, 1e-3), rel=1e-12)
    assert upsilon(10.0, 1e-3) == pytest.approx(995.0083326, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100), st.floats(1e-5, 0.1))
def test_upsilon_matches_mp(a, T):
    assert upsilon(a, T) == pytest.approx(upsilon_hp(a, T), rel=1e-12)


@pytest.mark.parametrize("a,T", [(0.0, 1e-3), (10.0, 0.0), (-1.0, 1e-3)])
def test_adapt_rejects_nonpositive(a, T):
    with pytest.raises(ValueError):
        adapt(np.ones(2), a, T)


def test_estimator_state_holds_sample():
    est = EstimatorState(T=1e-3, a=10.0, sigma_hat=np.zeros(2))
    out = est.sample(np.array([1e-4, -2e-4]))
    np.testing.assert_allclose(out, -upsilon(10.0, 1e-3) * np.array([1e-4, -2e-4]))
    np.testing.assert_array_equal(est.sigma_hat, out)


def test_constant_sigma_closed_form():
    """x_tilde' = -a x_tilde - sigma between samples; exact flow gives sigma_hat = e^{-aT} sigma."""
    a, T = 10.0, 1e-3
    sigma = np.array([0.3, -0.7])
    xt = np.zeros(2)
    sh = np.zeros(2)
    for _ in range(20):
        # exact solution of x_tilde' = -a x_tilde + (sigma_hat - sigma) over one period
        xt = math.exp(-a * T) * xt + (1 - math.exp(-a * T)) / a * (sh - sigma)
        sh = adapt(xt, a, T)
        np.testing.assert_allclose(sh, math.exp(-a * T) * sigma, rtol=1e-12)
        xt = xt  # x_tilde keeps evolving from its sampled value


# --- gating -----------------------------------------------------------------------

def test_gate_before_and_at_T():
    s = np.array([1.0, 2.0])
    np.testing.assert_array_equal(gate(s, 0.0005, 1e-3), np.zeros(2))
    np.testing.assert_array_equal(gate(s, 1e-3, 1e-3), s)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.01), st.floats(1e-4, 1e-3))
def test_gate_piecewise(t, T):
    s = np.array([0.4])
    out = gate(s, t, T)
    assert out[0] == (0.0 if t < T * (1 - 1e-9) else 0.4)


# --- decomposition ----------------------------------------------------------------

def test_matched_and_unmatched_directions(loop):
    th = np.array([0.2, -0.6])
    B, Bu = loop.model.B.eval(th), loop.Bu.eval(th)
    sm, su = decompose(B @ [1.7], th, loop)
    np.testing.assert_allclose(sm, [1.7], atol=1e-12)
    np.testing.assert_allclose(su, [0.0], atol=1e-12)
    sm, su = decompose(Bu @ [-0.4], th, loop)
    np.testing.assert_allclose(sm, [0.0], atol=1e-12)
    np.testing.assert_allclose(su, [-0.4], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(theta2, arrays(float, 2, elements=st.floats(-100, 100)))
def test_decompose_round_trip(th, s):
    lp = BaselineLoop(f16.build_f16_model(), const([[0.0, 0.0]]))
    sm, su = decompose(s, th, lp)
    rec = lp.model.B.eval(th) @ sm + lp.Bu.eval(th) @ su
    assert np.linalg.norm(rec - s) <= 1e-10 * max(1.0, np.linalg.norm(s))


def test_decompose_rejects_ill_conditioned():
    model = f16.build_f16_model()
    bad = FunctionMatrix(lambda th: model.B.eval(th) * (1 + 1e-13) + np.array([[1e-12], [0.0]]), (2, 1), 2)
    lp = BaselineLoop(model, const([[0.0, 0.0]]), Bu_override=bad)
    with pytest.raises(np.linalg.LinAlgError):
        decompose(np.ones(2), np.zeros(2), lp)


# --- compensator -------------------------------------------------------------------

def _comp(A, B, C, D):
    A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C, D))
    return Compensator(const(A), const(B), const(C), const(D), A.shape[0], B.shape[1], C.shape[0], 2)


def test_compensator_zero():
    st_ = CompensatorState(_comp(-np.eye(2), np.ones((2, 1)), np.ones((1, 2)), [[0.5]]))
    dx, eta = compensator_step(st_, [0.0], np.zeros(2))
    np.testing.assert_array_equal(dx, np.zeros(2))
    np.testing.assert_array_equal(eta, np.zeros(1))


def test_compensator_static_feedthrough():
    st_ = CompensatorState(_comp(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)), [[2.5]]))
    _, eta = compensator_step(st_, [0.8], np.zeros(2))
    np.testing.assert_allclose(eta, [2.0])


def test_compensator_step_response_matches_lti_oracle():
    A = np.array([[-3.0, 1.0], [0.0, -5.0]])
    B, C, D = np.array([[0.0], [2.0]]), np.array([[1.0, 0.5]]), np.array([[0.1]])
    st_ = CompensatorState(_comp(A, B, C, D))
    h, t_end, u = 1e-4, 0.8, np.array([1.0])
    x = np.zeros(2)
    f = lambda x: compensator_step(CompensatorState(st_.Hbar, x), u, np.zeros(2))[0]
    for _ in range(int(round(t_end / h))):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    _, eta = compensator_step(CompensatorState(st_.Hbar, x), u, np.zeros(2))
    np.testing.assert_allclose(eta, lti_step_response(A, B, C, D, t_end, u), atol=1e-6)


def test_compensator_state_dimension_checked():
    with pytest.raises(ValueError):
        CompensatorState(_comp(-np.eye(2), np.ones((2, 1)), np.ones((1, 2)), [[0.0]]), np.zeros(3))


# --- control law --------------------------------------------------------------------

def test_filtered_equilibrium():
    Kr = np.array([[2.0]])
    u = -np.array([0.3]) - np.array([0.1]) + Kr @ [0.5]
    du = control_derivative(u, [0.3], [0.1], [0.5], np.zeros(2), 30.0, Kr, "filtered")
    np.testing.assert_allclose(du, [0.0], atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.sampled_from(["filtered", "unfiltered"]))
def test_zero_gain_freezes_u(u, s, r, mode):
    du = control_derivative([u], [s], [0.0], [r], np.zeros(2), 0.0, np.array([[1.0]]), mode)
    np.testing.assert_array_equal(du, [0.0])


def test_scalar_filter_time_constant():
    K, sigma, h = 30.0, 0.4, 1e-4
    u, ts, us = np.zeros(1), [], []
    f = lambda u: control_derivative(u, [sigma], [0.0], [0.0], np.zeros(2), K, np.array([[1.0]]), "filtered")
    for i in range(2000):
        k1 = f(u)
        k2 = f(u + 0.5 * h * k1)
        k3 = f(u + 0.5 * h * k2)
        k4 = f(u + h * k3)
        u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        ts.append((i + 1) * h)
        us.append(u[0])
    np.testing.assert_allclose(us, scalar_filter_response(K, sigma, np.array(ts)), atol=1e-10)
    assert us[-1] == pytest.approx(-sigma, abs=1e-3)


def test_unfiltered_output_adds_feedforward():
    Kr = np.array([[3.0]])
    np.testing.assert_allclose(control_output([0.2], [0.5], np.zeros(2), Kr, "unfiltered"), [1.7])
    np.testing.assert_allclose(control_output([0.2], [0.5], np.zeros(2), Kr, "filtered"), [0.2])
    du = control_derivative([0.2], [0.1], [0.0], [0.5], np.zeros(2), 30.0, Kr, "unfiltered")
    np.testing.assert_allclose(du, [-30.0 * 0.3])


# --- composite F ---------------------------------------------------------------------

def test_F_without_compensator_is_filtered_pseudo_inverse(loop):
    zero = Compensator.zero(1, 1, 2)
    F = realize_F(loop, 30.0, zero)
    assert (F.nin, F.nout) == (2, 1)
    th, s = np.array([0.1, 0.5]), 2j
    Bd = np.linalg.pinv(loop.model.B.eval(th))
    expected = 30.0 / (s + 30.0) * Bd
    np.testing.assert_allclose(F.freq_response(th, s, np.eye(1)), expected, atol=1e-12)


def test_F_superposition_of_branches(loop):
    A, B, C, D = -4.0, 1.0, 2.0, 0.3
    H = _comp([[A]], [[B]], [[C]], [[D]])
    F = realize_F(loop, 30.0, H)
    th, s = np.array([-0.3, 0.2]), 1.5j
    Bd = np.linalg.pinv(loop.model.B.eval(th))
    Bud = np.linalg.pinv(loop.Bu.eval(th))
    Hs = C * B / (s - A) + D
    expected = 30.0 / (s + 30.0) * (Bd + Hs * Bud)
    np.testing.assert_allclose(F.freq_response(th, s, np.eye(1)), expected, atol=1e-12)

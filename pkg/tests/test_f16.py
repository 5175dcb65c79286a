from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpvl1 import f16
from lpvl1.lmi import baseline_gain
from lpvl1.lpv import left_pinv
from lpvl1.realize import BaselineLoop

from oracles import standard_density_slug


def test_dynamic_pressure_envelope_endpoints():
    lo = f16.dynamic_pressure(f16.H_MAX, f16.V_MIN)
    hi = f16.dynamic_pressure(f16.H_MIN, f16.V_MAX)
    assert lo == pytest.approx(f16.QBAR_MIN, rel=1e-3)
    assert hi == pytest.approx(f16.QBAR_MAX, rel=1e-3)


@pytest.mark.parametrize("h", [0.0, 5000.0, 20000.0, 36000.0])
def test_density_fit_close_to_standard_atmosphere(h):
    assert f16.air_density(h) == pytest.approx(standard_density_slug(h), rel=5e-3)


def test_scheduling_map_corners():
    np.testing.assert_allclose(f16.scheduling(f16.H_MAX, f16.V_MIN), [-1.0, -1.0], atol=2e-3)
    np.testing.assert_allclose(f16.scheduling(f16.H_MIN, f16.V_MAX), [1.0, 1.0], atol=2e-3)


def test_scheduling_envelope_inside_box():
    hs = np.linspace(f16.H_MIN, f16.H_MAX, 15)
    vs = np.linspace(f16.V_MIN, f16.V_MAX, 15)
    for h in hs:
        for v in vs:
            th = f16.scheduling(h, v)
            assert np.all(th >= -1 - 2e-3) and np.all(th <= 1 + 2e-3)


def test_uncertainty_at_origin():
    np.testing.assert_allclose(f16.f16_uncertainty(0.0, np.zeros(2)), [0.0, 0.01], atol=1e-16)


def test_uncertainty_zero_state_bound():
    for t in np.linspace(0, 10, 2001):
        assert np.linalg.norm(f16.f16_uncertainty(t, np.zeros(2))) <= f16.B_F0 * (1 + 1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 10), st.floats(0.01, 1.0), st.floats(0, 2 * np.pi), st.floats(0, 1), st.floats(0, 2 * np.pi),
       st.floats(0, 1))
def test_uncertainty_lipschitz_on_ball(t, delta, a1, r1, a2, r2):
    x = delta * r1 * np.array([np.cos(a1), np.sin(a1)])
    y = delta * r2 * np.array([np.cos(a2), np.sin(a2)])
    lhs = np.linalg.norm(f16.f16_uncertainty(t, x) - f16.f16_uncertainty(t, y))
    assert lhs <= f16.f16_lipschitz(delta) * np.linalg.norm(x - y) + 1e-15


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 10), st.floats(-1, 1), st.floats(-1, 1))
def test_uncertainty_time_rate_bound(t, x1, x2):
    x = np.array([x1, x2])
    dt = 1e-6
    rate = np.linalg.norm(f16.f16_uncertainty(t + dt, x) - f16.f16_uncertainty(t, x)) / dt
    assert rate <= f16.L_F_DERIV * (1 + 1e-4)


def test_trajectory_inside_box():
    th = f16.f16_theta(np.linspace(0, 10, 10001))
    assert th.shape == (10001, 2)
    assert np.all(np.abs(th) <= 1.0)
    np.testing.assert_allclose(th[:, 0], 0.5 * th[:, 1])


def test_model_domain():
    d = f16.build_f16_model().domain
    assert d.theta_lo == (-1.0, -1.0) and d.theta_hi == (1.0, 1.0)
    assert d.rate_hi == (0.02, 0.05)
    assert f16.build_f16_model().rho0 == 0.3


@pytest.fixture(scope="module")
def fake_design():
    model = f16.build_f16_model()
    Kx, _, _ = baseline_gain(model.A, model.B, model.domain, alpha=1.5, certify=False)
    return SimpleNamespace(model=model, loop=BaselineLoop(model, Kx), K=30.0, Hbar=None)


def test_nine_scenarios(fake_design):
    sc = f16.f16_scenarios(fake_design, horizon=0.1)
    assert len(sc) == 9
    assert len({s.name for s in sc}) == 9
    assert len({s.digest() for s in sc}) == 9
    for s in sc:
        assert s.compensation == "full"
        np.testing.assert_allclose(s.x_hat0, [np.pi / 180, -0.1])
        ths = s.thetas(np.linspace(0, 10, 101))
        assert fake_design.model.domain.contains(ths[0])


def test_toggle_settings(fake_design):
    none = f16.f16_scenario(fake_design, toggle="none", horizon=0.1)
    assert none.f is None and np.all(none.omega == np.eye(1))
    full = f16.f16_scenario(fake_design, toggle="full", horizon=0.1)
    assert full.omega[0, 0] == pytest.approx(0.7)
    with pytest.raises(ValueError):
        f16.f16_scenario(fake_design, toggle="bogus")


def test_matched_part_lies_in_range_of_B(fake_design):
    fm = f16.matched_part(fake_design.model)
    for t in np.linspace(0, 5, 11):
        x = np.array([0.05, -0.1])
        v = fm(t, x)
        B = fake_design.model.B.eval(f16.f16_theta(t))
        np.testing.assert_allclose(B @ (left_pinv(B) @ v), v, atol=1e-14)
        # the remainder is orthogonal to B
        r = f16.f16_uncertainty(t, x) - v
        assert abs(float(B[:, 0] @ r)) <= 1e-14

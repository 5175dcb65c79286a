import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpvl1.lpv import (OmegaPolytope, ParamDomain, ParamMatrix, affine, load_model, model_constants, monomial,
                       null_complement, register_basis, save_model)
from lpvl1 import f16

from oracles import affine_eval, f16_matrices

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def unit_box(counts=(3, 3)):
    return ParamDomain((-1, -1), (1, 1), (-0.1, -0.2), (0.1, 0.2), counts)


# --- evaluation ---------------------------------------------------------------

def test_f16_A_at_origin():
    A = f16.build_f16_model().A.eval([0.0, 0.0])
    np.testing.assert_allclose(A, [[-0.97, 0.94], [-3.44, -1.30]], atol=1e-15)


def test_constant_matrix_ignores_theta():
    M = ParamMatrix([[1.0, 2.0], [3.0, 4.0]], (), ntheta=2)
    np.testing.assert_array_equal(M.eval([0.7, -0.3]), [[1.0, 2.0], [3.0, 4.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 2, 3), elements=finite), arrays(float, 2, elements=st.floats(-1, 1)))
def test_affine_eval_matches_term_summation(coefs, theta):
    M = ParamMatrix(coefs[0], [(affine(0), coefs[1]), (affine(1), coefs[2])], ntheta=2)
    np.testing.assert_allclose(M.eval(theta), affine_eval(coefs[0], coefs[1:], theta), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (2, 2, 2), elements=finite), arrays(float, (2, 2, 2), elements=finite),
       arrays(float, 2, elements=st.floats(-1, 1)))
def test_eval_is_linear_in_coefficients(c1, c2, theta):
    M1 = ParamMatrix(c1[0], [(affine(0), c1[1])], ntheta=2)
    M2 = ParamMatrix(c2[0], [(affine(0), c2[1])], ntheta=2)
    np.testing.assert_allclose((M1 + M2).eval(theta), M1.eval(theta) + M2.eval(theta), atol=1e-12)


def test_dimension_mismatch_raises():
    M = ParamMatrix(np.eye(2), [(affine(0), np.eye(2))], ntheta=2)
    with pytest.raises(ValueError):
        M.eval([0.1, 0.2, 0.3])


def test_unregistered_basis_raises():
    with pytest.raises(KeyError):
        ParamMatrix(np.eye(2), [("no-such-basis", np.eye(2))], ntheta=1)


def test_affinity_flag():
    assert ParamMatrix(np.eye(2), [(affine(0), np.eye(2))], ntheta=1).affine
    assert not ParamMatrix(np.eye(2), [(monomial([2]), np.eye(2))], ntheta=1).affine


# --- rates --------------------------------------------------------------------

def test_rate_of_constant_is_zero():
    M = ParamMatrix(np.ones((2, 2)), (), ntheta=2)
    np.testing.assert_array_equal(M.eval_rate([0.2, 0.1], [1.0, -1.0]), np.zeros((2, 2)))


def test_rate_selects_coefficient():
    G = np.array([[1.0, 2.0], [3.0, 4.0]])
    M = ParamMatrix(np.zeros((2, 2)), [(affine(0), G), (affine(1), -G)], ntheta=2)
    np.testing.assert_allclose(M.eval_rate([0.3, 0.4], [1.0, 0.0]), G)


def test_quadratic_rate_matches_finite_difference():
    coef = np.array([[1.0, -2.0], [0.5, 3.0]])
    M = ParamMatrix(np.zeros((2, 2)), [(monomial([2, 0]), coef)], ntheta=2)
    th, thd, h = np.array([0.3, -0.2]), np.array([2.0, 0.0]), 1e-6
    fd = (M.eval(th + h * thd) - M.eval(th)) / h
    np.testing.assert_allclose(M.eval_rate(th, thd), 2 * 0.3 * 2 * coef, rtol=1e-12)
    np.testing.assert_allclose(M.eval_rate(th, thd), fd, rtol=1e-5)


def test_registered_basis_gradient():
    b = register_basis("test-sin", lambda th: np.sin(th[0]), lambda th: np.array([np.cos(th[0])]))
    M = ParamMatrix(np.zeros((1, 1)), [(b, [[2.0]])], ntheta=1)
    np.testing.assert_allclose(M.eval_rate([0.4], [3.0]), [[2.0 * np.cos(0.4) * 3.0]], rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(float, (3, 2, 2), elements=finite), st.floats(0.0, 6.0))
def test_rate_matches_central_difference_along_trajectory(coefs, t):
    M = ParamMatrix(coefs[0], [(affine(0), coefs[1]), (monomial([1, 1]), coefs[2])], ntheta=2)
    th = lambda s: np.array([0.5 * np.sin(s), np.cos(0.3 * s)])
    thd = lambda s: np.array([0.5 * np.cos(s), -0.3 * np.sin(0.3 * s)])
    h = 1e-4
    fd = (M.eval(th(t + h)) - M.eval(th(t - h))) / (2 * h)
    np.testing.assert_allclose(M.eval_rate(th(t), thd(t)), fd, atol=1e-6 * (1 + np.abs(coefs).max()))


# --- domains --------------------------------------------------------------------

def test_grid_one_axis():
    d = ParamDomain((-1,), (1,), (-0.1,), (0.1,), (3,))
    np.testing.assert_array_equal(d.grid_points().ravel(), [-1.0, 0.0, 1.0])


def test_grid_corners():
    d = ParamDomain((-1, 0), (1, 2), (0, 0), (0, 0), (2, 2))
    assert {tuple(p) for p in d.grid_points()} == {(-1, 0), (-1, 2), (1, 0), (1, 2)}


def test_f16_grid_count_and_membership():
    d = f16.f16_domain((6, 11))
    pts = d.grid_points()
    assert pts.shape == (66, 2)
    assert all(d.contains(p) for p in pts)


def test_vertices_counts():
    d1 = ParamDomain((-1,), (1,), (-0.5,), (0.5,), (2,))
    assert len(d1.vertices()) == 4
    d = f16.f16_domain()
    verts = d.vertices()
    assert len(verts) == 16
    assert all(d.contains(th) and d.contains_rate(rd) for th, rd in verts)


def test_b_theta_dot_f16():
    assert f16.f16_domain().b_theta_dot == pytest.approx(0.054, abs=5e-4)


def test_domain_validation():
    with pytest.raises(ValueError):
        ParamDomain((1,), (-1,), (0,), (0,), (3,))
    with pytest.raises(ValueError):
        ParamDomain((-1,), (1,), (0,), (0,), (1,))


def test_refinement_is_nested():
    d = unit_box((3, 4))
    coarse = {tuple(np.round(p, 12)) for p in d.grid_points()}
    fine = {tuple(np.round(p, 12)) for p in d.refined(2).grid_points()}
    assert coarse <= fine


# --- null complement ------------------------------------------------------------

def test_null_complement_canonical():
    B = ParamMatrix([[1.0], [0.0]], (), ntheta=1)
    d = ParamDomain((-1,), (1,), (0,), (0,), (3,))
    Bu = null_complement(B, d).eval([0.0])
    np.testing.assert_allclose(np.abs(Bu), [[0.0], [1.0]], atol=1e-15)


def test_null_complement_f16_point():
    m = f16.build_f16_model()
    Bu = m.B.eval([0.0, 0.0])
    nc = null_complement(m.B, m.domain).eval([0.0, 0.0])
    expected = np.array([[-0.264], [0.002]]) / np.hypot(0.264, 0.002)
    assert abs((Bu.T @ nc)[0, 0]) < 1e-12
    np.testing.assert_allclose(np.abs(nc), np.abs(expected), atol=1e-12)


def test_null_complement_grid_sweep_and_continuity():
    m = f16.build_f16_model()
    nc = null_complement(m.B, m.domain)
    pts = m.domain.refined(2).grid_points()
    Bb, Nb = m.B.eval_batch(pts), nc.eval_batch(pts)
    assert np.abs(np.swapaxes(Bb, 1, 2) @ Nb).max() <= 1e-10
    assert np.linalg.svd(np.concatenate([Bb, Nb], axis=2), compute_uv=False)[:, -1].min() > 0
    np.testing.assert_allclose(np.swapaxes(Nb, 1, 2) @ Nb, np.broadcast_to(np.eye(1), (len(pts), 1, 1)),
                               atol=1e-12)
    # no sign flips between neighbouring points along q_s
    line = np.column_stack([np.linspace(-1, 1, 201), np.zeros(201)])
    cols = nc.eval_batch(line)[:, :, 0]
    assert np.all(np.sum(cols[1:] * cols[:-1], axis=1) > 0.99)


def test_null_complement_rank_deficient():
    B = ParamMatrix([[0.0], [0.0]], [(affine(0), [[1.0], [0.0]])], ntheta=1)
    d = ParamDomain((-1,), (1,), (0,), (0,), (3,))
    with pytest.raises(ValueError, match="rank deficient"):
        null_complement(B, d)


# --- model constants --------------------------------------------------------------

def _model(B: ParamMatrix, d: ParamDomain):
    from lpvl1.lpv import LpvModel
    A = ParamMatrix(-np.eye(2), (), ntheta=d.ntheta)
    C = ParamMatrix([[1.0, 0.0]], (), ntheta=d.ntheta)
    return LpvModel(A, B, C, d, OmegaPolytope.identity(1), 0.1)


def test_constant_B_constants():
    d = unit_box()
    mc = model_constants(_model(ParamMatrix([[1.0], [2.0]], (), ntheta=2), d), d)
    assert mc.b_B == pytest.approx(np.sqrt(5.0))
    assert mc.L_B == 0.0


def test_lipschitz_of_affine_B_within_safety_factor():
    G = np.array([[0.3], [-0.4]])
    B = ParamMatrix([[1.0], [2.0]], [(affine(0), G)], ntheta=1)
    d = ParamDomain((-1,), (1,), (0,), (0,), (5,))
    mc = model_constants(_model(B, d), d)
    # dense pairwise oracle: for affine B the quotient is exactly ||G||
    g = np.linalg.norm(G, 2)
    assert g <= mc.L_B <= 1.1 * g + 1e-12


def test_norm_bounds_dominate_grid_values():
    m = f16.build_f16_model((5, 3))
    mc = model_constants(m, m.domain)
    for th in m.domain.grid_points():
        assert np.linalg.norm(m.B.eval(th), 2) <= mc.b_B + 1e-15
        assert np.linalg.norm(m.C.eval(th), 2) <= mc.b_C + 1e-15


def test_constants_monotone_under_nested_refinement():
    m = f16.build_f16_model((3, 3))
    coarse = model_constants(m, m.domain)
    fine = model_constants(m, m.domain.refined(2))
    for k in ("b_Am", "b_B", "b_Bdag", "b_C", "b_Bu", "b_Budag"):
        assert getattr(fine, k) >= getattr(coarse, k) - 1e-15


# --- omega polytope ----------------------------------------------------------------

def test_omega_vertices_must_be_dominant():
    with pytest.raises(ValueError):
        OmegaPolytope([[[1.0, 2.0], [0.0, 1.0]]])
    with pytest.raises(ValueError):
        OmegaPolytope.interval(-0.5, 1.0)


def test_omega_max_norms():
    om = OmegaPolytope.interval(0.5, 1.5)
    assert om.max_norm() == pytest.approx(1.5)
    assert om.max_norm(lambda w: w - np.eye(1)) == pytest.approx(0.5)
    assert om.max_norm(np.linalg.inv) == pytest.approx(2.0)


# --- interchange format -----------------------------------------------------------

def test_model_round_trip_bit_exact(tmp_path):
    m = f16.build_f16_model()
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for th in m.domain.grid_points():
        for key in "ABC":
            assert np.array_equal(getattr(m, key).eval(th), getattr(back, key).eval(th))
    assert back.domain == m.domain
    doc = json.loads((tmp_path / "m.json").read_text())
    assert {"n", "m", "p", "basis", "A", "B", "C", "theta_box", "rate_box", "omega_vertices"} <= set(doc)


def test_f16_matrices_match_typed_coefficients():
    m = f16.build_f16_model()
    rng = np.random.default_rng(3)
    for th in rng.uniform(-1, 1, (20, 2)):
        A, B = f16_matrices(*th)
        np.testing.assert_allclose(m.A.eval(th), A, atol=1e-14)
        np.testing.assert_allclose(m.B.eval(th), B, atol=1e-14)

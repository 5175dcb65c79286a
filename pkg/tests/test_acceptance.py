"""The twelve acceptance criteria, each at its stated tolerance and time limit.

Every test records a one-line ``detail`` that conftest prints with PASS/FAIL.
"""
import math
import time

import numpy as np
import pytest

from lpvl1 import f16
from lpvl1.design import CHAIN_MAPS, CORE_MAPS, bound_chain, filter_certificate, map_systems, ppg_suite
from lpvl1.lmi import LpvStateSpace, ppg_bound
from lpvl1.lpv import ParamDomain, ParamMatrix
from lpvl1.realize import BaselineLoop, realize_F
from lpvl1.runtime import decompose, upsilon
from lpvl1.simulate import (Reference, Scenario, estimation_error, simulate_closed_loop, simulate_ideal,
                            sup_error)

from oracles import upsilon_hp

pytestmark = pytest.mark.acceptance

RESIDUAL_TOL = 1e-7


def _within(value, target, rel):
    return abs(value - target) <= rel * target


# 1 -------------------------------------------------------------------------------

def test_criterion_01_estimator_closed_form(record_property):
    t0 = time.perf_counter()
    model = f16.build_f16_model()
    loop = BaselineLoop(model, ParamMatrix([[0.0, 0.0]], (), ntheta=2))
    sigma = np.array([0.03, -0.2])
    a, T = 10.0, 1e-3
    s = Scenario(loop, theta=lambda t: np.zeros((np.size(t), 2)), reference=Reference("step", 0.0),
                 f=lambda t, x: sigma, horizon=0.1, h=1e-5, T=T, a=a, compensation="none")
    tr = simulate_closed_loop(s)
    k = np.round(tr.t / T, 6)
    at_samples = (k == np.round(k)) & (tr.t >= T - 1e-12)
    est = tr["sigma_hat"][at_samples]
    expected = math.exp(-a * T) * sigma
    rel = float(np.max(np.abs(est - expected) / np.abs(expected)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {rel:.2e} over {int(at_samples.sum())} samples, {elapsed:.2f}s")
    assert at_samples.sum() == 100
    assert rel <= 1e-6
    assert elapsed < 5.0


# 2 -------------------------------------------------------------------------------

def test_criterion_02_upsilon(record_property):
    val, ref = upsilon(10.0, 1e-3), upsilon_hp(10.0, 1e-3)
    record_property("detail", f"Upsilon = {val:.10f}, rel err {abs(val - ref) / ref:.1e}")
    assert str(val).startswith("995.0083")
    assert abs(val - ref) <= 1e-9 * ref


# 3 -------------------------------------------------------------------------------

def test_criterion_03_lti_ppg_oracle(record_property):
    t0 = time.perf_counter()
    sys = LpvStateSpace.from_matrices(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), ntheta=0)
    mus = [round(0.1 * k, 1) for k in range(1, 20)]
    g, cert = ppg_bound(sys, ParamDomain.lti(), None, mus)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"gamma = {g:.6f} at mu = {cert.mu:g}, {elapsed:.1f}s")
    assert 1.0 <= g <= 1.05
    assert elapsed < 60.0


# 4 -------------------------------------------------------------------------------

def test_criterion_04_f16_ppg_numbers(f16_design, f16_core_ppg, record_property):
    suite = f16_core_ppg.value
    g = {k: suite[k][0] for k in CORE_MAPS}
    mu = {k: suite[k][1].mu for k in CORE_MAPS}
    elapsed = f16_design.seconds + f16_core_ppg.seconds
    record_property("detail", "G_xm {G_xm:.4f}, HxmCKr {HxmCKr:.3f}, G_xum {G_xum:.3f}".format(**g)
                    + f" (mu {mu['G_xm']:g}/{mu['HxmCKr']:g}/{mu['G_xum']:g}), {elapsed:.0f}s")
    assert _within(g["G_xm"], 0.0509, 0.25)
    assert _within(g["HxmCKr"], 6.35, 0.25)
    assert _within(g["G_xum"], 1.874, 0.25)
    assert elapsed < 600.0


# 5 -------------------------------------------------------------------------------

def test_criterion_05_rho_in(f16_design, record_property):
    r = f16_design.value.rho_in
    record_property("detail", f"rho_in = {r:.4f} (rho0 = 0.3)")
    assert math.isfinite(r)
    assert 0.3 <= r <= 1.5


# 6 -------------------------------------------------------------------------------

def test_criterion_06_uua_effectiveness(f16_design, record_property):
    d = f16_design.value
    g, g_open = d.gamma_uua, d.gamma_open
    g_cl = d.uua_cert.scalars["gamma_cl"]
    record_property("detail", f"gamma {g:.4f} < open {g_open:.4f}; gamma_cl {g_cl:.4f} = {g_cl / g:.3f} gamma; "
                              f"design {f16_design.seconds:.0f}s")
    assert g < g_open
    assert g_cl <= 1.1 * g
    assert f16_design.seconds < 600.0


# 7 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tracking_runs(f16_design):
    t0 = time.perf_counter()
    d = f16_design.value
    runs = {c: simulate_closed_loop(f16.f16_scenario(d, 2.0, "full", compensation=c))
            for c in ("full", "matched", "baseline")}
    ideal = simulate_ideal(f16.f16_scenario(d, 2.0, "none"))
    return runs, ideal, time.perf_counter() - t0


def test_criterion_07_tracking_quality(tracking_runs, record_property):
    runs, ideal, elapsed = tracking_runs
    e = {c: sup_error(tr, ideal, "x", 0, skip=1.0) for c, tr in runs.items()}
    record_property("detail", f"full {e['full']:.3e}, full/baseline {e['full'] / e['baseline']:.3f}, "
                              f"full/matched {e['full'] / e['matched']:.3f}, {elapsed:.0f}s")
    assert not any(tr.diverged for tr in runs.values())
    assert e["full"] <= 0.25 * e["baseline"]
    assert e["full"] <= 0.6 * e["matched"]
    assert elapsed < 120.0


# 8 -------------------------------------------------------------------------------

def test_criterion_08_sample_time_refinement(f16_design, tracking_runs, record_property):
    t0 = time.perf_counter()
    coarse = simulate_closed_loop(f16.f16_scenario(f16_design.value, 2.0, "full", T=2e-3))
    e2 = estimation_error(coarse, skip=2 * 2e-3)
    e1 = estimation_error(tracking_runs[0]["full"], skip=2 * 1e-3)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"err(T=0.002) {e2:.4e}, err(T=0.001) {e1:.4e}, ratio {e1 / e2:.3f}, "
                              f"{elapsed:.0f}s")
    assert e1 / e2 <= 0.7
    assert elapsed < 120.0


# 9 -------------------------------------------------------------------------------

def test_criterion_09_ideal_linearity(f16_design, record_property):
    t0 = time.perf_counter()
    d = f16_design.value
    xs = {r: simulate_ideal(f16.f16_scenario(d, r, "none"))["x"] for r in (1.0, 2.0, 3.0)}
    worst = 0.0
    for r1, r2 in ((1.0, 2.0), (1.0, 3.0), (2.0, 3.0)):
        scaled = xs[r1] * (r2 / r1)
        worst = max(worst, float(np.max(np.abs(xs[r2] - scaled)) / np.max(np.abs(xs[r2]))))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max pairwise ratio error {worst:.1e}, {elapsed:.0f}s")
    assert worst <= 1e-8
    assert elapsed < 60.0


# 10 ------------------------------------------------------------------------------

def test_criterion_10_decomposition_round_trip(f16_design, record_property):
    loop = f16_design.value.loop
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        th = rng.uniform(-1, 1, 2)
        s = rng.normal(size=2)
        sm, su = decompose(s, th, loop)
        rec = loop.model.B.eval(th) @ sm + loop.Bu.eval(th) @ su
        worst = max(worst, float(np.linalg.norm(rec - s)))
    record_property("detail", f"max residual {worst:.1e} over 1000 draws")
    assert worst <= 1e-10


# 11 ------------------------------------------------------------------------------

def _stability_residual(cert, sys, omegas):
    d = cert.domain.refined(2)
    worst = -np.inf
    for th in d.grid_points():
        P = cert.P(th)
        worst = max(worst, -float(np.linalg.eigvalsh(P)[0]))
        for w in omegas:
            A = sys.eval(th, w)[0] if isinstance(sys, LpvStateSpace) else sys.eval(th)
            for rd in d.rate_vertices():
                L = A.T @ P + P @ A + cert.matrix_rate("P", rd) + cert.scalars["mu_P"] * P
                worst = max(worst, float(np.linalg.eigvalsh(L)[-1]))
    return worst


def _ppg_residual(cert, sys, omegas):
    d = cert.domain.refined(2)
    mu, g, ups = cert.mu, cert.gamma, cert.scalars["upsilon"]
    worst = -np.inf
    for th in d.grid_points():
        P = cert.P(th)
        for w in omegas:
            A, B, C, D = sys.eval(th, w)
            nin, nout = B.shape[1], C.shape[0]
            for rd in d.rate_vertices():
                tl = A.T @ P + P @ A + mu * P + cert.matrix_rate("P", rd)
                L1 = np.block([[tl, P @ B], [B.T @ P, -ups * np.eye(nin)]])
                worst = max(worst, float(np.linalg.eigvalsh(L1)[-1]))
            L2 = np.block([[mu * P, np.zeros((P.shape[0], nin)), C.T],
                           [np.zeros((nin, P.shape[0])), (g - ups) * np.eye(nin), D.T],
                           [C, D, g * np.eye(nout)]])
            worst = max(worst, -float(np.linalg.eigvalsh(L2)[0]))
    return worst


def test_criterion_11_certificate_residuals(f16_design, f16_core_ppg, record_property):
    t0 = time.perf_counter()
    d = f16_design.value
    om = d.model.omega
    res = {"baseline_P": _stability_residual(d.baseline_cert, d.loop.Am, [None])}
    systems = map_systems(d, CORE_MAPS)
    for name, (_, cert) in f16_core_ppg.value.items():
        res[f"ppg_{name}"] = _ppg_residual(cert, systems[name], list(om.vertices))
    res["ppg_H_xum_to_z"] = _ppg_residual(d.open_cert, d.plant.open_loop(), [None])
    F = filter_certificate(d)
    res["stability_F"] = _stability_residual(F.cert, realize_F(d.loop, d.K, d.Hbar), list(om.vertices))
    # the synthesis certificate's LMIs involve the generalized plant; its own refined-grid check is used
    res["uua_Hbar"] = d.uua_cert.verify_residual
    elapsed = time.perf_counter() - t0
    worst = max(res, key=res.get)
    record_property("detail", f"{len(res)} certificates, worst {worst} = {res[worst]:.2e}, {elapsed:.0f}s")
    assert tuple(d.uua_cert.verify_counts) == d.model.domain.refined(2).grid_counts
    assert all(v <= RESIDUAL_TOL for v in res.values()), res
    assert elapsed < 300.0


# 12 ------------------------------------------------------------------------------

def test_criterion_12_bound_chain(f16_design, f16_core_ppg, tracking_runs, record_property):
    t0 = time.perf_counter()
    d = f16_design.value
    chain = ppg_suite(d, CHAIN_MAPS, verify=True)
    norms = {k: v[0] for k, v in {**f16_core_ppg.value, **chain}.items()}
    try:
        F = filter_certificate(d)
    except Exception:  # noqa: BLE001 - a missing certificate is reported by the bound chain
        F = None
    rep = bound_chain(d, f16.f16_budget(d.model), float(np.deg2rad(3.0)), 1e-3, 10.0, norms, F)
    elapsed = time.perf_counter() - t0
    vals = {k: getattr(rep, k) for k in ("rho_r", "rho", "rho_u", "gamma1", "gamma2", "alpha1", "alpha2",
                                         "alpha3")}
    tr = tracking_runs[0]["full"]
    x_inf = float(np.linalg.norm(tr["x"], axis=1).max())
    u_inf = float(np.linalg.norm(tr["u"], axis=1).max())
    verdict = "feasible" if rep.feasible else f"infeasible ({', '.join(rep.failed)})"
    record_property("detail", f"{verdict}; rho {rep.rho:.3g} vs |x| {x_inf:.3g}, rho_u {rep.rho_u:.3g} vs "
                              f"|u| {u_inf:.3g}, {elapsed:.0f}s")
    assert all(math.isfinite(v) for v in vals.values()), vals
    if rep.feasible:
        assert x_inf <= rep.rho
        assert u_inf <= rep.rho_u
    assert elapsed < 300.0

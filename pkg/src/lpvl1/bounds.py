"""Analytic constants, stability condition and transient/steady-state performance bounds."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .lmi import Certificate, beta_theta, eig_extremes
from .lpv import ModelConstants, OmegaPolytope


@dataclass
class UncertaintyBudget:
    """Prior knowledge of f(t, x) and of the input gain set."""

    b_f0: float
    L_f: Callable[[float], float]
    l_f: float
    omega: OmegaPolytope

    def __post_init__(self):
        if self.b_f0 < 0 or self.l_f < 0:
            raise ValueError("b_f0 and l_f must be nonnegative")

    @property
    def omega_minus_I(self) -> float:
        m = self.omega.m
        return self.omega.max_norm(lambda w: w - np.eye(m))

    @property
    def omega_max(self) -> float:
        return self.omega.max_norm()

    @property
    def omega_inv_max(self) -> float:
        return self.omega.max_norm(np.linalg.inv)


@dataclass
class DerivedConstants:
    delta: float
    b_f1_0: float
    b_f2_0: float
    l_fbar: float
    L_fbar: float
    l_f1: float
    l_f2: float
    L_f1: float
    L_f2: float


def derived_constants(budget: UncertaintyBudget, mc: ModelConstants, delta: float,
                     omega_Kx: float | None = None) -> DerivedConstants:
    """Constants of the matched/unmatched split f1 = B^+ fbar, f2 = B_u^+ fbar at radius delta.

    ``omega_Kx`` is max ||(w - I) K_x(theta)||; by default the product bound
    max||w - I|| * b_Kx, which is exact for a single input.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    wI = budget.omega_minus_I
    Lf = float(budget.L_f(delta))
    wK = wI * mc.b_Kx if omega_Kx is None else omega_Kx
    return DerivedConstants(
        delta=float(delta),
        b_f1_0=mc.b_Bdag * budget.b_f0,
        b_f2_0=mc.b_Budag * budget.b_f0,
        l_fbar=budget.l_f + wI * (mc.L_B * mc.b_Kx + mc.b_B * mc.L_Kx) * delta * mc.b_theta_dot,
        L_fbar=Lf + mc.b_BKx * wI,
        l_f1=(budget.l_f * mc.b_Bdag + mc.L_Bdag * mc.b_theta_dot * (budget.b_f0 + Lf * delta)
              + mc.L_Kx * mc.b_theta_dot * delta * wI),
        l_f2=budget.l_f * mc.b_Budag + mc.L_Budag * mc.b_theta_dot * (budget.b_f0 + Lf * delta),
        L_f1=Lf * mc.b_Bdag + wK,
        L_f2=Lf * mc.b_Budag,
    )


@dataclass
class RuntimeBounds:
    b_sigma: float
    b_xdot: float
    b_sigma_hat_c: float
    b_udot: float
    b_sigma_tilde: float


def runtime_bounds(rho: float, rho_u: float, T: float, a: float, K, mc: ModelConstants,
                   budget: UncertaintyBudget, r_bar: float, n: int, Hbar_norm: float = 0.0) -> RuntimeBounds:
    """Bounds on sigma, xdot, sigma_hat_c, udot and the estimation error sigma_tilde."""
    wI = budget.omega_minus_I
    Lf = float(budget.L_f(rho))
    rn = math.sqrt(n)
    Knorm = float(np.linalg.norm(np.atleast_2d(K), 2))
    b_sigma = mc.b_B * wI * (rho_u + mc.b_Kx * rho) + Lf * rho + budget.b_f0
    b_xdot = (mc.b_Am * rho + mc.b_B * rho_u * budget.omega_max + Lf * rho + budget.b_f0
              + mc.b_B * wI * mc.b_Kx * rho)
    b_shc = math.exp(-a * T) * rn * b_sigma
    b_udot = Knorm * (rho_u + (1.0 + Hbar_norm) * mc.b_Bdag * b_shc + mc.b_Kr * r_bar)
    b_st = (2.0 * rn * T * (wI * (mc.b_B * b_udot + mc.L_B * mc.b_theta_dot * rho_u) + budget.l_f + Lf * b_xdot)
            - math.expm1(-a * T) * rn * b_sigma)
    return RuntimeBounds(b_sigma, b_xdot, b_shc, b_udot, b_st)


@dataclass
class FilterCertificateData:
    """Stability certificate of F(theta) plus max ||C_F||, ||B_F|| evaluators."""

    cert: Certificate
    C_norm: float
    B: Callable

    @property
    def mu(self) -> float:
        return float(self.cert.scalars["mu_P"])

    def lam_ratio(self) -> float:
        lo, hi = eig_extremes(self.cert)
        return math.sqrt(hi / lo)


def gamma0(T: float, rb: RuntimeBounds, F: FilterCertificateData) -> float:
    """max||C_F|| (lambda_ratio beta(T) b_sigma + beta(inf) b_sigma_tilde)."""
    bT = beta_theta(T, F.mu, F.cert, F.B)
    binf = beta_theta(np.inf, F.mu, F.cert, F.B)
    return F.C_norm * (F.lam_ratio() * bT * rb.b_sigma + binf * rb.b_sigma_tilde)


@dataclass
class Norms:
    """PPG bounds consumed by the performance analysis (names follow the maps they bound)."""

    G_xm: float
    G_xum: float
    HxmCKr: float
    Hxm: float
    Hxm_CmI_Kr: float
    winvC: float
    winvC_Hbar: float
    winvCmI_Kr: float
    G_m: float
    G_um: float
    Hm_CmI_Kr: float
    Hbar: float = 0.0


@dataclass
class BoundReport:
    feasible: bool
    failed: list
    rho_in: float
    rho_r: float
    rho: float
    rho_ur: float
    rho_u: float
    gamma1: float
    gamma0_bar: float
    gamma0: float
    gamma2: float
    alpha1: float
    alpha2: float
    alpha3: float
    reference_error: dict
    ideal_error: dict
    stability_margin: float
    derived_rho: dict
    derived_rho_r: dict
    runtime: dict
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


FORMULA_IDS = {
    "b_f1_0": "matched nominal bound at zero state", "b_f2_0": "unmatched nominal bound at zero state",
    "l_fbar": "lumped Lipschitz constant in x", "L_fbar": "lumped Lipschitz constant in t",
    "l_f1": "matched Lipschitz constant in x", "l_f2": "unmatched Lipschitz constant in x",
    "L_f1": "matched Lipschitz constant on the rho ball", "L_f2": "unmatched Lipschitz constant on the rho ball",
    "b_sigma": "lumped uncertainty bound", "b_xdot": "state derivative bound",
    "b_sigma_hat_c": "gated estimate bound", "b_udot": "control derivative bound",
    "b_sigma_tilde": "sampled estimation error bound", "gamma0": "filter error gain",
    "rho_r": "small-gain stability condition", "rho": "state ball radius", "rho_ur": "reference control radius",
    "rho_u": "control ball radius", "gamma0_bar": "sample-time admissibility constraint",
    "gamma2": "control error bound", "alpha1": "matched output error coefficient",
    "alpha2": "unmatched output error coefficient", "alpha3": "reference output error coefficient",
    "x_xid": "state error to ideal", "u_uid": "control error to ideal", "y_yid": "output error to ideal",
}


def stability_lhs_rhs(rho_r: float, gamma1: float, N: Norms, budget, mc, r_bar, rho_in, omega_Kx=None):
    dc = derived_constants(budget, mc, rho_r + gamma1, omega_Kx)
    lhs = N.G_xm * (dc.L_f1 * rho_r + dc.b_f1_0) + N.G_xum * (dc.L_f2 * rho_r + dc.b_f2_0)
    rhs = rho_r - N.HxmCKr * r_bar - rho_in
    return lhs, rhs


def scan_rho_r(N: Norms, budget, mc, r_bar, rho_in, gamma1=0.01, lo=None, hi=None, count=400, omega_Kx=None):
    """Smallest rho_r on a geometric grid of [lo, hi] satisfying the stability condition.

    Returns (rho_r, margin, satisfied); when no grid point works the point with
    the smallest violation is returned.
    """
    lo = rho_in if lo is None else lo
    hi = 100.0 * max(rho_in, 1e-12) if hi is None else hi
    grid = np.geomspace(max(lo, 1e-12), hi, count)
    best, best_m = grid[0], -np.inf
    for rr in grid:
        lhs, rhs = stability_lhs_rhs(rr, gamma1, N, budget, mc, r_bar, rho_in, omega_Kx)
        m = rhs - lhs
        if m > 0:
            return float(rr), float(m), True
        if m > best_m:
            best, best_m = rr, m
    return float(best), float(best_m), False


def performance_bounds(N: Norms, budget: UncertaintyBudget, mc: ModelConstants, rho_in: float, r_bar: float,
                       T: float, a: float, K, n: int, F: FilterCertificateData | None,
                       gamma1: float = 0.01, rho_r: float | None = None, omega_Kx: float | None = None,
                       scan_count: int = 400) -> BoundReport:
    """Stability scan, gamma chain and error bounds against the reference and ideal systems.

    Every failing constraint is listed in ``failed``.
    """
    failed = []
    if rho_r is None:
        rho_r, margin, ok = scan_rho_r(N, budget, mc, r_bar, rho_in, gamma1, count=scan_count, omega_Kx=omega_Kx)
    else:
        lhs, rhs = stability_lhs_rhs(rho_r, gamma1, N, budget, mc, r_bar, rho_in, omega_Kx)
        margin, ok = rhs - lhs, rhs > lhs
    if not ok:
        failed.append("stability condition")
    rho = rho_r + gamma1
    dr = derived_constants(budget, mc, rho, omega_Kx)
    drr = derived_constants(budget, mc, rho_r, omega_Kx)
    denom = 1.0 - N.G_xm * dr.L_f1 - N.G_xum * dr.L_f2
    if denom <= 0 or N.Hxm <= 0:
        failed.append("gamma1 admissibility")
        g0bar = 0.0
    else:
        g0bar = 0.99 * gamma1 * denom / N.Hxm
    eta1 = drr.L_f1 * rho_r + drr.b_f1_0
    eta2 = drr.L_f2 * rho_r + drr.b_f2_0
    rho_ur = N.winvC * (mc.b_Kr * r_bar + eta1 + N.Hbar * eta2)
    gamma2 = (N.winvC * dr.L_f1 + N.winvC_Hbar * dr.L_f2) * gamma1 + budget.omega_inv_max * g0bar
    rho_u = rho_ur + gamma2
    rb = runtime_bounds(rho, rho_u, T, a, K, mc, budget, r_bar, n, N.Hbar)
    if F is not None:
        g0 = gamma0(T, rb, F)
        if not g0 < g0bar:
            failed.append("sample-time constraint")
    else:
        g0 = float("nan")
        failed.append("sample-time constraint (no filter certificate)")
    alpha1 = N.G_xm * eta1 + N.G_xum * eta2 + N.Hxm_CmI_Kr * r_bar
    alpha2 = N.winvC * eta1 + N.winvC_Hbar * eta2 + N.winvCmI_Kr * r_bar
    alpha3 = N.G_m * eta1 + N.G_um * eta2 + N.Hm_CmI_Kr * r_bar
    ref_err = {"x": rho, "u": rho_u, "x_xr": gamma1, "u_ur": gamma2, "y_yr": mc.b_C * gamma1}
    ideal_err = {"x_xid": alpha1 + gamma1, "u_uid": alpha2 + gamma2, "y_yid": alpha3 + mc.b_C * gamma1}
    return BoundReport(
        feasible=not failed, failed=failed, rho_in=rho_in, rho_r=rho_r, rho=rho, rho_ur=rho_ur, rho_u=rho_u,
        gamma1=gamma1, gamma0_bar=g0bar, gamma0=g0, gamma2=gamma2, alpha1=alpha1, alpha2=alpha2, alpha3=alpha3,
        reference_error=ref_err, ideal_error=ideal_err, stability_margin=margin, derived_rho=asdict(dr),
        derived_rho_r=asdict(drr), runtime=asdict(rb),
        inputs={"norms": asdict(N), "model_constants": mc.to_dict(), "b_f0": budget.b_f0, "l_f": budget.l_f,
                "r_bar": r_bar, "T": T, "a": a, "formula_ids": FORMULA_IDS},
    )


def verify_stability_condition(norms, budget: UncertaintyBudget, mc: ModelConstants, r_bar: float, rho_in: float,
                               gamma1: float = 0.01, lo: float | None = None, hi: float | None = None,
                               count: int = 400, omega_Kx: float | None = None) -> dict:
    """Scan rho_r over [lo, hi] (default [rho_in, 100 rho_in]) and report where the small-gain condition holds.

    ``norms`` supplies G_xm, G_xum and HxmCKr (a Norms instance or a mapping).
    Lipschitz constants are re-evaluated at rho_r + gamma1 for every candidate.
    """
    get = (lambda k: float(norms[k])) if isinstance(norms, dict) else (lambda k: float(getattr(norms, k)))
    N = Norms(G_xm=get("G_xm"), G_xum=get("G_xum"), HxmCKr=get("HxmCKr"), Hxm=0.0, Hxm_CmI_Kr=0.0, winvC=0.0,
              winvC_Hbar=0.0, winvCmI_Kr=0.0, G_m=0.0, G_um=0.0, Hm_CmI_Kr=0.0)
    lo = rho_in if lo is None else float(lo)
    hi = 100.0 * max(rho_in, 1e-12) if hi is None else float(hi)
    grid = np.geomspace(max(lo, 1e-12), max(hi, lo), count)
    margins = []
    for rr in grid:
        lhs, rhs = stability_lhs_rhs(float(rr), gamma1, N, budget, mc, r_bar, rho_in, omega_Kx)
        margins.append(rhs - lhs)
    margins = np.array(margins)
    ok = margins > 0
    runs, start = [], None
    for i, flag in enumerate(ok):
        if flag and start is None:
            start = i
        if start is not None and (not flag or i == len(ok) - 1):
            end = i if flag else i - 1
            runs.append([float(grid[start]), float(grid[end])])
            start = None
    best = int(np.argmax(margins))
    return {
        "feasible": bool(ok.any()),
        "interval": [runs[0][0], runs[-1][1]] if runs else None,
        "intervals": runs,
        "smallest_rho_r": float(grid[ok][0]) if ok.any() else None,
        "best_rho_r": float(grid[best]),
        "best_margin": float(margins[best]),
        "scan": {"lo": float(grid[0]), "hi": float(grid[-1]), "count": int(count)},
        "inputs": {"G_xm": N.G_xm, "G_xum": N.G_xum, "HxmCKr": N.HxmCKr, "r_bar": r_bar, "rho_in": rho_in,
                   "gamma1": gamma1},
    }

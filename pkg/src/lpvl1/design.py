"""Controller design pipeline: baseline gain, UUA compensator, PPG suite and bound chain."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import BoundReport, FilterCertificateData, Norms, UncertaintyBudget, performance_bounds
from .lmi import Certificate, InfeasibleError, baseline_gain, certify_stability, ppg_bound, rho_in
from .lpv import LpvModel, model_constants
from .realize import (BaselineLoop, Compensator, realize_F, realize_filter_inv, realize_filter_inv_H, realize_Gxm,
                      realize_Gxum, realize_HxmCKr, realize_Hxm)
from .synthesis import GeneralizedPlant, build_generalized_plant, static_weight, synthesize_uua

log = logging.getLogger(__name__)

ALPHA_GRID = (1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0)
CORE_MAPS = ("G_xm", "HxmCKr", "G_xum")
CHAIN_MAPS = ("Hxm", "Hxm_CmI_Kr", "winvC", "winvC_Hbar", "winvCmI_Kr", "G_m", "G_um", "Hm_CmI_Kr", "Hbar")


def frozen_modes(Am, thetas) -> dict:
    """Natural-frequency and damping extremes of the frozen-theta matrices A_m(theta)."""
    ev = np.linalg.eigvals(Am.eval_batch(np.asarray(thetas, dtype=float)))
    wn = np.abs(ev)
    zeta = -ev.real / np.maximum(wn, 1e-300)
    return {"wn_min": float(wn.min()), "wn_max": float(wn.max()), "zeta_min": float(zeta.min()),
            "decay_min": float(-ev.real.max())}


def tune_baseline(model: LpvModel, alphas: Sequence[float] = ALPHA_GRID, wn_min: float | None = 2.0,
                  check_factor: int = 2):
    """Smallest decay rate in ``alphas`` whose frozen closed loop keeps every natural frequency >= wn_min.

    Frequencies are checked on a grid ``check_factor`` times finer than the solve grid.
    Returns (alpha, Kx, certificate, mu_P, tried).
    """
    check = model.domain.refined(check_factor).grid_points()
    tried = []
    for alpha in alphas:
        Kx, cert, mu_P = baseline_gain(model.A, model.B, model.domain, float(alpha))
        modes = frozen_modes(BaselineLoop(model, Kx).Am, check)
        tried.append({"alpha": float(alpha), "mu_P": float(mu_P), **modes})
        log.info("baseline alpha=%.3g wn_min=%.3f zeta_min=%.3f", alpha, modes["wn_min"], modes["zeta_min"])
        if wn_min is None or modes["wn_min"] >= wn_min:
            return float(alpha), Kx, cert, float(mu_P), tried
    raise InfeasibleError(f"no decay rate in {tuple(alphas)} reaches natural frequency {wn_min}", tried)


@dataclass
class Design:
    model: LpvModel
    alpha: float
    loop: BaselineLoop
    baseline_cert: Certificate
    mu_P: float
    K: float
    plant: GeneralizedPlant
    Hbar: Compensator
    uua_cert: Certificate | None
    gamma_uua: float
    gamma_open: float
    open_cert: Certificate | None
    tuning: list = field(default_factory=list)

    @property
    def rho_in(self) -> float:
        return rho_in(self.baseline_cert, self.model.rho0)

    def summary(self) -> dict:
        return {
            "model": self.model.name, "alpha": self.alpha, "mu_P": self.mu_P, "K": self.K,
            "rho0": self.model.rho0, "rho_in": self.rho_in, "Hbar_order": self.Hbar.order,
            "gamma_uua": self.gamma_uua, "gamma_open": self.gamma_open,
            "gamma_cl": None if self.uua_cert is None else self.uua_cert.scalars.get("gamma_cl"),
            "baseline_tuning": self.tuning,
        }


def design_controller(model: LpvModel, K: float, alpha: float | None = None,
                      alphas: Sequence[float] = ALPHA_GRID, wn_min: float | None = 2.0, weight=None,
                      bandwidth: float | None = 200.0, feedthrough: float | None = None,
                      mu_uua: Sequence[float] | None = None, verify: bool = True, uua: bool = True,
                      reverify_mu: Sequence[float] | None = None) -> Design:
    """Baseline state feedback, then the UUA compensator for the weight ``weight`` (default identity).

    ``weight`` is a static n x n (or n_z x n) matrix applied to the state.  With
    ``uua=False`` the compensator is zero and no synthesis is run.  ``reverify_mu``
    is the mu grid of the closed-loop re-verification of the compensator.
    """
    d = model.domain
    if alpha is None:
        alpha, Kx, cert, mu_P, tried = tune_baseline(model, alphas, wn_min)
    else:
        Kx, cert, mu_P = baseline_gain(model.A, model.B, d, float(alpha))
        tried = []
    loop = BaselineLoop(model, Kx)
    n, m = model.n, model.m
    W = static_weight(np.eye(n) if weight is None else weight, model.ntheta)
    plant = build_generalized_plant(loop.Am, model.B, loop.Bu, model.C, W)
    if not uua or n == m:
        Hbar = Compensator.zero(n - m, m, model.ntheta)
        return Design(model, alpha, loop, cert, mu_P, float(K), plant, Hbar, None, 0.0, 0.0, None, tried)
    Hbar, gamma, ucert = synthesize_uua(plant, d, mu_uua, verify=verify, bandwidth=bandwidth,
                                        feedthrough=feedthrough, reverify_mu=reverify_mu)
    g_open, ocert = ppg_bound(plant.open_loop(), d, None, mu_uua if mu_uua is not None else None, verify=verify)
    return Design(model, alpha, loop, cert, mu_P, float(K), plant, Hbar, ucert, gamma, g_open, ocert, tried)


def map_systems(design: Design, names: Sequence[str] = CORE_MAPS) -> dict:
    """State-space realizations of the named closed-loop maps."""
    loop, K, C, m = design.loop, design.K, design.model.C, design.loop.m
    build = {
        "G_xm": lambda: realize_Gxm(loop, K),
        "HxmCKr": lambda: realize_HxmCKr(loop, K),
        "G_xum": lambda: realize_Gxum(loop, K, design.Hbar),
        "Hxm": lambda: realize_Hxm(loop),
        "Hxm_CmI_Kr": lambda: realize_HxmCKr(loop, K, minus_identity=True),
        "winvC": lambda: realize_filter_inv(m, K, loop.ntheta),
        "winvC_Hbar": lambda: realize_filter_inv_H(m, K, design.Hbar),
        "winvCmI_Kr": lambda: realize_filter_inv(m, K, loop.ntheta, Kr=loop.Kr, minus_identity=True),
        "G_m": lambda: realize_Gxm(loop, K, output=C),
        "G_um": lambda: realize_Gxum(loop, K, design.Hbar, output=C),
        "Hm_CmI_Kr": lambda: realize_HxmCKr(loop, K, minus_identity=True, output=C),
        "Hbar": lambda: design.Hbar.as_system(),
    }
    unknown = set(names) - set(build)
    if unknown:
        raise KeyError(f"unknown maps {sorted(unknown)}")
    return {name: build[name]() for name in names}


def _static_gain(sys, d, omega) -> float:
    return max(float(np.linalg.norm(sys.eval(th, w)[3], np.inf)) for th in d.grid_points()
               for w in sys.omega_points(omega))


def ppg_suite(design: Design, names: Sequence[str] = CORE_MAPS, mu_grid: Sequence[float] | None = None,
              verify: bool = True) -> dict:
    """{name: (gamma, certificate | None)} for the named maps.

    ``mu_grid`` applies to the three core maps and is clipped below twice the
    frozen decay rate; other maps use a geometric grid up to that limit.  Static
    maps (order zero) are bounded by the largest row-sum norm of their feedthrough.
    """
    d, om = design.model.domain, design.model.omega
    out = {}
    for name, sys in map_systems(design, names).items():
        omega = om if sys.omega_affine else None
        if sys.n == 0:
            out[name] = (_static_gain(sys, d, omega), None)
            continue
        decay = sys.decay_rate(d.grid_points(), omega)
        if mu_grid is None or name not in CORE_MAPS:
            mus = np.geomspace(0.05, 1.96 * decay, 12)
        else:
            mus = [mu for mu in mu_grid if mu < 2 * decay] or [decay]
        out[name] = ppg_bound(sys, d, omega, mus, verify=verify)
        log.info("PPG %s = %.5g (mu=%.3g)", name, out[name][0], out[name][1].mu)
    return out


def filter_certificate(design: Design, verify: bool = True) -> FilterCertificateData:
    """Stability certificate for F(theta) plus max ||C_F|| and the input matrix B_F(theta)."""
    sysF = realize_F(design.loop, design.K, design.Hbar)
    d, om = design.model.domain, design.model.omega
    decay = sysF.decay_rate(d.grid_points(), om)
    cert = certify_stability(sysF, d, np.linspace(0.2, 1.9, 8) * decay, omega=om, verify=verify)
    C_norm = max(float(np.linalg.norm(sysF.eval(th, w)[2], 2)) for th in d.grid_points()
                 for w in sysF.omega_points(om))
    m = design.loop.m
    return FilterCertificateData(cert, C_norm, lambda th: sysF.eval(th, np.eye(m))[1])


def bound_chain(design: Design, budget: UncertaintyBudget, r_bar: float, T: float, a: float,
                norms: dict, F: FilterCertificateData | None, gamma1: float = 0.01) -> BoundReport:
    """Performance bounds from precomputed PPG values ``norms`` (name -> gamma)."""
    N = Norms(**{k: float(norms[k]) for k in CORE_MAPS + CHAIN_MAPS})
    mc = model_constants(design.model, design.model.domain, design.loop.Kx, design.loop.Kr, design.loop.Bu)
    return performance_bounds(N, budget, mc, design.rho_in, r_bar, T, a, design.K, design.model.n, F,
                              gamma1=gamma1)

"""F-16 short-period LPV benchmark: model, scheduling map, uncertainties, scenarios."""
from __future__ import annotations

import numpy as np

from .lpv import LpvModel, OmegaPolytope, ParamDomain, ParamMatrix, affine

QBAR_MIN, QBAR_MAX = 37.1, 830.4  # psf
V_MIN, V_MAX = 350.0, 900.0  # ft/s
H_MIN, H_MAX = 5000.0, 40000.0  # ft
THETA_RATE = (0.02, 0.05)
RHO0 = 0.3
OMEGA_TRUE = 0.7
OMEGA_BOX = (0.5, 1.5)
DEFAULT_COUNTS = (11, 6)  # spacing 0.2 on qbar_s and 0.4 on V_s


def air_density(h_ft):
    """Air density in slug/ft^3 (exponential-temperature-lapse fit used by F-16 simulation codes)."""
    tfac = 1.0 - 0.703e-5 * np.asarray(h_ft, dtype=float)
    return 2.377e-3 * tfac ** 4.14


def dynamic_pressure(h_ft, v_fps):
    return 0.5 * air_density(h_ft) * np.asarray(v_fps, dtype=float) ** 2


def scale(value, lo, hi):
    return 2.0 * (np.asarray(value, dtype=float) - lo) / (hi - lo) - 1.0


def scheduling(h_ft, v_fps) -> np.ndarray:
    """(qbar_s, V_s) in [-1, 1]^2 for an altitude/airspeed pair."""
    return np.array([scale(dynamic_pressure(h_ft, v_fps), QBAR_MIN, QBAR_MAX), scale(v_fps, V_MIN, V_MAX)])


def f16_domain(counts=DEFAULT_COUNTS) -> ParamDomain:
    return ParamDomain((-1.0, -1.0), (1.0, 1.0), (-THETA_RATE[0], -THETA_RATE[1]),
                       THETA_RATE, counts)


def build_f16_model(counts=DEFAULT_COUNTS) -> LpvModel:
    A = ParamMatrix([[-0.97, 0.94], [-3.44, -1.30]],
                    [(affine(0), -np.array([[0.70, 0.02], [2.99, 0.89]])),
                     (affine(1), -np.array([[0.004, 0.0], [-0.086, 0.004]]))], ntheta=2)
    B = ParamMatrix([[-0.002], [-0.264]], [(affine(0), [[0.001], [-0.241]])], ntheta=2)
    C = ParamMatrix([[1.0, 0.0]], (), ntheta=2)
    return LpvModel(A, B, C, f16_domain(counts), OmegaPolytope.interval(*OMEGA_BOX), RHO0, "f16-short-period")


def f16_uncertainty(t, x) -> np.ndarray:
    x1, x2 = x[0], x[1]
    return np.array([0.02 * np.sin(20 * np.pi * x1) + 0.01 * np.sin(np.pi * t),
                     5.0 * x1 * x2 + 0.01 * np.cos(2 * np.pi * t)])


def f16_omega() -> float:
    return OMEGA_TRUE


def f16_theta(t):
    """Scheduling trajectory sin(2 pi t / 5) * [0.5, 1]."""
    t = np.asarray(t, dtype=float)
    s = np.sin(2 * np.pi * t / 5.0)
    return np.stack([0.5 * s, s], axis=-1)


B_F0 = 0.01 * np.sqrt(2.0)
L_F_DERIV = 0.0702


def f16_lipschitz(delta):
    return 0.16 * np.pi ** 2 + 25.0 * delta ** 2




# ---------------------------------------------------------------------------
# controller design and benchmark scenarios

SOLVE_COUNTS = (6, 4)
WN_MIN = 2.0
K_FILTER = 30.0
T_SAMPLE = 1e-3
A_PRED = 10.0
H_STEP = 1e-4
X_HAT0 = (np.pi / 180.0, -0.1)
REFS_DEG = (1.0, 2.0, 3.0)
TOGGLES = ("none", "matched", "full")
UUA_WEIGHT = ((1.0, 0.0), (0.0, 0.0))
UUA_BANDWIDTH = 40.0
UUA_FEEDTHROUGH = 40.0
MU_UUA = (1.0, 1.5, 2.0, 2.5)
MU_REVERIFY = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
MU_PPG = (1.0, 1.5, 2.0, 2.25, 2.5, 2.75, 2.9)


def design_f16(counts=SOLVE_COUNTS, K: float = K_FILTER, alpha: float | None = None,
               bandwidth: float | None = UUA_BANDWIDTH, feedthrough: float | None = UUA_FEEDTHROUGH,
               mu_uua=MU_UUA, verify: bool = True, reverify_mu=MU_REVERIFY):
    """Baseline gain tuned by the natural-frequency rule, then UUA with weight diag(1, 0)."""
    from .design import design_controller
    return design_controller(build_f16_model(counts), K, alpha=alpha, wn_min=WN_MIN, weight=np.array(UUA_WEIGHT),
                             bandwidth=bandwidth, feedthrough=feedthrough, mu_uua=mu_uua, verify=verify,
                             reverify_mu=reverify_mu)


def f16_budget(model: LpvModel):
    from .bounds import UncertaintyBudget
    return UncertaintyBudget(B_F0, f16_lipschitz, L_F_DERIV, model.omega)


def matched_part(model: LpvModel):
    """f -> B B^+ f along the benchmark scheduling trajectory."""
    from .lpv import left_pinv

    def fm(t, x):
        B = model.B.eval(f16_theta(t))
        return B @ (left_pinv(B) @ f16_uncertainty(t, x))
    return fm


def f16_scenario(design, ref_deg: float = 2.0, toggle: str = "full", compensation: str = "full",
                 horizon: float = 10.0, h: float = H_STEP, T: float = T_SAMPLE, a: float = A_PRED,
                 record_every: int = 1, mode: str = "unfiltered"):
    """One benchmark run: step of ``ref_deg`` degrees under an uncertainty toggle.

    Toggles: none (omega = 1, f = 0), matched (omega = 0.7, f projected onto range B),
    full (omega = 0.7 and the complete f).
    """
    from .simulate import Reference, Scenario
    if toggle not in TOGGLES:
        raise ValueError(f"toggle must be one of {TOGGLES}")
    if toggle == "none":
        omega, f, fname = 1.0, None, "none"
    elif toggle == "matched":
        omega, f, fname = OMEGA_TRUE, matched_part(design.model), "f16-matched"
    else:
        omega, f, fname = OMEGA_TRUE, f16_uncertainty, "f16-full"
    ref = Reference("step", np.deg2rad(ref_deg), 0.0, name=f"{ref_deg:g}deg")
    return Scenario(
        loop=design.loop, theta=f16_theta, reference=ref, omega=omega, f=f, horizon=horizon, h=h, T=T, a=a,
        K=design.K, mode=mode, compensation=compensation, Hbar=design.Hbar, x0=np.zeros(2),
        x_hat0=np.array(X_HAT0), record_every=record_every,
        name=f"r{ref_deg:g}_{toggle}_{compensation}", theta_name="sin(2 pi t / 5) * [0.5, 1]", f_name=fname,
        model_id=design.model.name,
    )


def f16_scenarios(design, refs=REFS_DEG, toggles=TOGGLES, **kw) -> list:
    """Step references times uncertainty toggles, all with full compensation."""
    return [f16_scenario(design, r, tg, **kw) for r in refs for tg in toggles]

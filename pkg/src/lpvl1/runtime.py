"""Adaptive controller: predictor, piecewise-constant estimator, decomposition, control law."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .realize import BaselineLoop, Compensator, realize_F

__all__ = [
    "PredictorState", "EstimatorState", "ControlLawState", "CompensatorState",
    "upsilon", "predictor_derivative", "adapt", "gate", "decompose", "compensator_step",
    "control_derivative", "control_output", "realize_F",
]

FILTERED = "filtered"
UNFILTERED = "unfiltered"
MODES = (FILTERED, UNFILTERED)


def upsilon(a: float, T: float) -> float:
    """Estimation gain a / (e^{aT} - 1)."""
    if a <= 0 or T <= 0:
        raise ValueError("a and T must be positive")
    return a / math.expm1(a * T)


@dataclass
class PredictorState:
    x_hat: np.ndarray
    a: float
    last_sample_time: float = 0.0

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("predictor gain a must be positive")
        self.x_hat = np.asarray(self.x_hat, dtype=float).copy()


@dataclass
class EstimatorState:
    T: float
    a: float
    sigma_hat: np.ndarray

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("sampling period T must be positive")
        self.sigma_hat = np.asarray(self.sigma_hat, dtype=float).copy()

    @property
    def Upsilon(self) -> float:
        return upsilon(self.a, self.T)

    def sample(self, x_tilde) -> np.ndarray:
        self.sigma_hat = -self.Upsilon * np.asarray(x_tilde, dtype=float)
        return self.sigma_hat


@dataclass
class ControlLawState:
    """``u`` holds u itself (filtered) or u_ad (unfiltered)."""

    u: np.ndarray
    K: np.ndarray
    mode: str = FILTERED

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.u = np.asarray(self.u, dtype=float).copy()
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))


@dataclass
class CompensatorState:
    Hbar: Compensator
    x_Hbar: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.x_Hbar is None:
            self.x_Hbar = np.zeros(self.Hbar.order)
        self.x_Hbar = np.asarray(self.x_Hbar, dtype=float).copy()
        if self.x_Hbar.shape != (self.Hbar.order,):
            raise ValueError(f"compensator state must have length {self.Hbar.order}")


def predictor_derivative(x_hat, x, u, theta, sigma_hat, a: float, loop: BaselineLoop) -> np.ndarray:
    """A_m(theta) x + B(theta) u + sigma_hat - a (x_hat - x)."""
    x_hat, x = np.asarray(x_hat, dtype=float), np.asarray(x, dtype=float)
    Am, B = loop.Am.eval(theta), loop.model.B.eval(theta)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (Am.shape[0],) or x_hat.shape != x.shape or u.shape != (B.shape[1],):
        raise ValueError("inconsistent dimensions")
    return Am @ x + B @ u + np.asarray(sigma_hat, dtype=float) - a * (x_hat - x)


def adapt(x_tilde_at_sample, a: float, T: float) -> np.ndarray:
    """Sample-and-hold estimate -Upsilon(T) x_tilde(iT)."""
    return -upsilon(a, T) * np.asarray(x_tilde_at_sample, dtype=float)


def gate(sigma_hat, t: float, T: float) -> np.ndarray:
    """Zero on [0, T), pass-through afterwards."""
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    # relative slack so that t = k*h accumulated in floating point still counts as T
    if t < T * (1.0 - 1e-9):
        return np.zeros_like(sigma_hat)
    return sigma_hat


def decompose(sigma_hat_c, theta, loop: BaselineLoop, cond_max: float = 1e10):
    """[sigma_m; sigma_um] = [B B_u]^{-1} sigma_hat_c."""
    B, Bu = loop.model.B.eval(theta), loop.Bu.eval(theta)
    Bbar = np.hstack([B, Bu])
    if np.linalg.cond(Bbar) > cond_max:
        raise np.linalg.LinAlgError("[B B_u] is ill-conditioned")
    s = np.linalg.solve(Bbar, np.asarray(sigma_hat_c, dtype=float))
    m = B.shape[1]
    return s[:m], s[m:]


def compensator_step(state: CompensatorState, sigma_um, theta):
    """(d x_H / dt, eta2_hat) for the feedforward compensator."""
    AH, BH, CH, DH = state.Hbar.eval(theta)
    sigma_um = np.atleast_1d(np.asarray(sigma_um, dtype=float))
    x = state.x_Hbar
    return AH @ x + BH @ sigma_um, CH @ x + DH @ sigma_um


def control_derivative(u, sigma_m, eta2_hat, r, theta, K, K_r, mode: str = FILTERED) -> np.ndarray:
    """Filtered: -K(u + sigma_m + eta2 - K_r r).  Unfiltered: -K(u_ad + sigma_m + eta2)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    e = u + np.asarray(sigma_m, dtype=float) + np.asarray(eta2_hat, dtype=float)
    if mode == FILTERED:
        Kr = K_r.eval(theta) if hasattr(K_r, "eval") else np.atleast_2d(np.asarray(K_r, dtype=float))
        e = e - Kr @ np.atleast_1d(np.asarray(r, dtype=float))
    elif mode != UNFILTERED:
        raise ValueError(f"mode must be one of {MODES}")
    return -K @ e


def control_output(u_state, r, theta, K_r, mode: str = FILTERED) -> np.ndarray:
    """Adaptive input u: the state itself (filtered) or u_ad + K_r(theta) r (unfiltered)."""
    u_state = np.atleast_1d(np.asarray(u_state, dtype=float))
    if mode == FILTERED:
        return u_state
    Kr = K_r.eval(theta) if hasattr(K_r, "eval") else np.atleast_2d(np.asarray(K_r, dtype=float))
    return u_state + Kr @ np.atleast_1d(np.asarray(r, dtype=float))

"""Fixed-step RK4 simulation of the adaptive loop, the reference system and the ideal system."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .realize import BaselineLoop, Compensator
from .runtime import FILTERED, MODES, UNFILTERED, upsilon

log = logging.getLogger(__name__)

# full: matched + unmatched compensation; matched: drop the unmatched branch;
# none: feedforward K_r r without adaptive terms; baseline: u_bl = K_x x alone (u = 0)
COMPENSATION = ("full", "matched", "none", "baseline")
DIVERGENCE = 1e6
CHUNK = 4096


@dataclass
class Reference:
    """r(t): ``step`` (value for t >= start), ``ramp`` (slope*(t-start)) or ``custom``."""

    kind: str = "step"
    value: np.ndarray | float = 0.0
    start: float = 0.0
    fn: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("step", "ramp", "custom"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom reference needs fn")
        self.value = np.atleast_1d(np.asarray(self.value, dtype=float))

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "custom":
            return np.atleast_2d(np.array([np.atleast_1d(self.fn(ti)) for ti in t], dtype=float))
        on = (t >= self.start)[:, None]
        if self.kind == "step":
            return on * self.value[None, :]
        return on * (t - self.start)[:, None] * self.value[None, :]

    def describe(self) -> dict:
        return {"kind": self.kind, "value": self.value.tolist(), "start": self.start, "name": self.name}


def _steps(duration: float, h: float, what: str) -> int:
    k = int(round(duration / h))
    if abs(k * h - duration) > 1e-9 * max(1.0, abs(duration)):
        raise ValueError(f"{what} ({duration}) must be an integer multiple of the step h={h}")
    return k


@dataclass
class Scenario:
    loop: BaselineLoop
    theta: Callable
    reference: Reference
    omega: np.ndarray | float = 1.0
    f: Callable | None = None
    horizon: float = 10.0
    h: float = 1e-4
    T: float = 1e-3
    a: float = 10.0
    K: np.ndarray | float = 30.0
    mode: str = UNFILTERED
    compensation: str = "full"
    Hbar: Compensator | None = None
    x0: np.ndarray | None = None
    x_hat0: np.ndarray | None = None
    record_every: int = 1
    name: str = "scenario"
    theta_name: str = "theta"
    f_name: str = "none"
    model_id: str = ""

    def __post_init__(self):
        n, m = self.loop.n, self.loop.m
        if self.h <= 0:
            raise ValueError("step h must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.compensation not in COMPENSATION:
            raise ValueError(f"compensation must be one of {COMPENSATION}")
        self.sample_every = _steps(self.T, self.h, "T")
        if self.sample_every < 1:
            raise ValueError("T must be at least one integration step")
        self.n_steps = _steps(self.horizon, self.h, "horizon")
        if self.reference.kind != "custom":
            _steps(self.reference.start, self.h, "reference start")
        om = np.atleast_2d(np.asarray(self.omega, dtype=float))
        self.omega = om[0, 0] * np.eye(m) if om.shape == (1, 1) else om
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.K = K[0, 0] * np.eye(m) if K.shape == (1, 1) else K
        self.x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float)
        self.x_hat0 = self.x0.copy() if self.x_hat0 is None else np.asarray(self.x_hat0, dtype=float)
        rho0 = self.loop.model.rho0
        if rho0 is not None and np.linalg.norm(self.x0) > rho0 * (1 + 1e-12):
            raise ValueError(f"|x0| = {np.linalg.norm(self.x0):.4g} exceeds rho0 = {rho0}")
        if self.compensation == "full" and self.Hbar is None:
            self.Hbar = Compensator.zero(n - m, m, self.loop.ntheta)
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def describe(self) -> dict:
        return {
            "name": self.name, "model": self.model_id or self.loop.model.name, "theta": self.theta_name,
            "omega": self.omega.tolist(), "f": self.f_name, "reference": self.reference.describe(),
            "horizon": self.horizon, "h": self.h, "T": self.T, "a": self.a, "K": self.K.tolist(),
            "mode": self.mode, "compensation": self.compensation,
            "Hbar_order": 0 if self.Hbar is None else self.Hbar.order,
            "x0": self.x0.tolist(), "x_hat0": self.x_hat0.tolist(), "record_every": self.record_every,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode()).hexdigest()[:16]

    def thetas(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        try:
            th = np.asarray(self.theta(t), dtype=float)
            if th.shape == (len(t), self.loop.ntheta):
                return th
        except Exception:  # scalar-only trajectory
            pass
        return np.array([np.atleast_1d(self.theta(ti)) for ti in t], dtype=float).reshape(len(t), self.loop.ntheta)

    def uncertainty(self, t, x) -> np.ndarray:
        if self.f is None:
            return np.zeros_like(x)
        return np.asarray(self.f(t, x), dtype=float)


FIELDS = ("theta", "x", "x_hat", "x_tilde", "u_bl", "u", "u_total", "sigma", "sigma_hat", "sigma_hat_c",
          "sigma_hat_m", "sigma_hat_um", "eta2_hat", "y")


@dataclass
class SimTrace:
    t: np.ndarray
    columns: dict
    meta: dict = field(default_factory=dict)
    diverged: bool = False

    def __getitem__(self, name) -> np.ndarray:
        if name == "t":
            return self.t
        return self.columns[name]

    def __len__(self):
        return len(self.t)

    def header(self) -> list[str]:
        out = ["t"]
        for name, col in self.columns.items():
            out += [name] if col.shape[1] == 1 else [f"{name}_{i + 1}" for i in range(col.shape[1])]
        return out

    def to_csv(self, path) -> Path:
        """Write the trace and a ``.json`` sidecar with the metadata."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.column_stack([self.t] + list(self.columns.values())) if len(self.t) else np.zeros((0, 0))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in data:
                w.writerow([repr(float(v)) for v in row])
        meta = dict(self.meta, diverged=self.diverged, rows=len(self.t))
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_csv(cls, path) -> "SimTrace":
        path = Path(path)
        with open(path) as fh:
            header = next(csv.reader(fh))
            has_rows = bool(fh.readline().strip())
        if has_rows:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        else:
            data = np.zeros((0, len(header)))
        cols, groups = {}, {}
        for j, name in enumerate(header[1:], start=1):
            base = name.rsplit("_", 1)[0] if name.rsplit("_", 1)[-1].isdigit() else name
            groups.setdefault(base, []).append(j)
        for base, idx in groups.items():
            cols[base] = data[:, idx]
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(data[:, 0], cols, meta, bool(meta.get("diverged", False)))


# ---------------------------------------------------------------------------
# chunked matrix assembly


@dataclass
class _Chunk:
    M: np.ndarray  # (2N+1, nz, nz)
    g: np.ndarray  # (2N+1, nz)
    E: np.ndarray | None  # (2N+1, nz, n) or None when f enters the x block only
    N: np.ndarray | None  # (2N+1, nz, ns)


def _stage_times(s: Scenario, k0: int, k1: int) -> np.ndarray:
    return (np.arange(2 * k0, 2 * k1 + 1) * 0.5) * s.h


def _ff_scale(s: Scenario) -> float:
    return 0.0 if s.compensation == "baseline" else 1.0


def _loop_mats(s: Scenario, th: np.ndarray):
    loop = s.loop
    A, B = loop.model.A.eval_batch(th), loop.model.B.eval_batch(th)
    Kx = loop.Kx.eval_batch(th)
    Kr = loop.Kr.eval_batch(th)
    S = loop.Bbar_inv_batch(th)
    return A, B, Kx, Kr, S


def _adaptive_blocks(s: Scenario, th, r, reference_system: bool):
    """Assemble z' = M z + g + E f + N s for either the adaptive loop or the reference system.

    Adaptive state z = [x, x_hat, u, x_H], held vector s = [sigma_hat, sigma_hat_c].
    Reference state z = [x, u, x_H] with the true sigma substituted (no held vector).
    """
    n, m = s.loop.n, s.loop.m
    A, B, Kx, Kr, S = _loop_mats(s, th)
    Am = A + B @ Kx
    K, om = s.K, s.omega
    J = len(th)
    full = s.compensation == "full"
    nh = s.Hbar.order if full else 0
    Sm, Sum = S[:, :m, :], S[:, m:, :]
    if full:
        AH, BH, CH, DH = s.Hbar.eval_batch(th)
    Bw = B @ om
    Krr = np.einsum("jab,jb->ja", Kr, r) * _ff_scale(s)

    # control input u_out = u_state (+ K_r r when unfiltered)
    ff = Krr if s.mode == UNFILTERED else np.zeros((J, m))
    filt = Krr if s.mode == FILTERED else np.zeros((J, m))

    if reference_system:
        ix, iu, ih = 0, n, n + m
        nz = n + m + nh
    else:
        ix, ixh, iu, ih = 0, n, 2 * n, 2 * n + m
        nz = 2 * n + m + nh
    M = np.zeros((J, nz, nz))
    g = np.zeros((J, nz))
    # plant
    M[:, ix:ix + n, ix:ix + n] = A + Bw @ Kx
    M[:, ix:ix + n, iu:iu + m] = Bw
    g[:, ix:ix + n] = np.einsum("jab,jb->ja", Bw, ff)
    if not reference_system:
        M[:, ixh:ixh + n, ix:ix + n] = Am + s.a * np.eye(n)
        M[:, ixh:ixh + n, ixh:ixh + n] = -s.a * np.eye(n)
        M[:, ixh:ixh + n, iu:iu + m] = B
        g[:, ixh:ixh + n] = np.einsum("jab,jb->ja", B, ff)
    # control law
    M[:, iu:iu + m, iu:iu + m] = -K
    g[:, iu:iu + m] = filt @ K.T
    # Nc maps the (gated) uncertainty estimate into the state derivative
    Nc = np.zeros((J, nz, n))
    if s.compensation in ("full", "matched"):
        Nc[:, iu:iu + m, :] = -K @ Sm
    if full:
        Nc[:, iu:iu + m, :] += -K @ DH @ Sum
        M[:, iu:iu + m, ih:ih + nh] = -K @ CH
        M[:, ih:ih + nh, ih:ih + nh] = AH
        Nc[:, ih:ih + nh, :] = BH @ Sum

    if reference_system:
        # sigma = B(w - I)(Kx x + u_out) + f  ->  L z + l + f
        BwI = B @ (om - np.eye(m))
        L = np.zeros((J, n, nz))
        L[:, :, ix:ix + n] = BwI @ Kx
        L[:, :, iu:iu + m] = BwI
        lvec = np.einsum("jab,jb->ja", BwI, ff)
        M = M + Nc @ L
        g = g + np.einsum("jab,jb->ja", Nc, lvec)
        E = Nc.copy()
        E[:, ix:ix + n, :] += np.eye(n)
        return _Chunk(M, g, E, None)
    Np = np.zeros((J, nz, n))
    Np[:, ixh:ixh + n, :] = np.eye(n)
    return _Chunk(M, g, None, np.concatenate([Np, Nc], axis=2))


def _ideal_blocks(s: Scenario, th, r):
    A, B, Kx, Kr, _ = _loop_mats(s, th)
    M = A + B @ Kx
    g = np.einsum("jab,jb->ja", B @ Kr, r)
    return _Chunk(M, g, None, None)


def _integrate(s: Scenario, z0: np.ndarray, build, n: int, with_f: bool, adaptive: bool):
    """Classical RK4 with chunked precomputed stage matrices.

    Returns recorded (t, z, held) arrays and the divergence flag.
    """
    h, N = s.h, s.n_steps
    kT = s.sample_every
    rec = s.record_every
    z = z0.astype(float).copy()
    held = np.zeros(2 * n)
    if adaptive:
        Ups = upsilon(s.a, s.T)
        held[:n] = -Ups * (z[n:2 * n] - z[:n])  # sample at t = 0; gated from the control law
    ts, zs, hs = [], [], []
    diverged = False
    f = s.uncertainty if (with_f and s.f is not None) else None
    k0 = 0
    while k0 < N and not diverged:
        k1 = min(N, k0 + CHUNK)
        times = _stage_times(s, k0, k1)
        ch = build(times)
        M, g, E, Nm = ch.M, ch.g, ch.E, ch.N
        for k in range(k0, k1):
            if k % kT == 0 and k > 0 and adaptive:
                held[:n] = -Ups * (z[n:2 * n] - z[:n])
            if adaptive:
                held[n:] = held[:n] if k >= kT else 0.0
            if k % rec == 0:
                ts.append(k * h)
                zs.append(z.copy())
                hs.append(held.copy())
            j = 2 * (k - k0)
            t = k * h
            w = Nm[j] @ held if Nm is not None else None
            wh = Nm[j + 1] @ held if Nm is not None else None
            w1 = Nm[j + 2] @ held if Nm is not None else None

            def deriv(jj, tt, zz, ww):
                d = M[jj] @ zz + g[jj]
                if ww is not None:
                    d += ww
                if f is not None:
                    fx = f(tt, zz[:n])
                    if E is None:
                        d[:n] += fx
                    else:
                        d += E[jj] @ fx
                return d

            k1v = deriv(j, t, z, w)
            k2v = deriv(j + 1, t + 0.5 * h, z + 0.5 * h * k1v, wh)
            k3v = deriv(j + 1, t + 0.5 * h, z + 0.5 * h * k2v, wh)
            k4v = deriv(j + 2, t + h, z + h * k3v, w1)
            z = z + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            if not np.all(np.isfinite(z)) or np.linalg.norm(z[:n]) > DIVERGENCE:
                diverged = True
                log.warning("%s: state diverged at t=%.6g; trace truncated", s.name, (k + 1) * h)
                break
        k0 = k1
    if not diverged and N % rec == 0:
        if adaptive and N % kT == 0 and N > 0:
            held[:n] = -Ups * (z[n:2 * n] - z[:n])
            held[n:] = held[:n] if N >= kT else 0.0
        if N > 0:
            ts.append(N * h)
            zs.append(z.copy())
            hs.append(held.copy())
    nz = len(z0)
    return (np.asarray(ts), np.asarray(zs).reshape(-1, nz), np.asarray(hs).reshape(-1, 2 * n), diverged)


def _empty_trace(s: Scenario, kind: str) -> SimTrace:
    """Zero-row trace that keeps the full column layout."""
    n, m, k = s.loop.n, s.loop.m, s.loop.ntheta
    p = s.loop.model.C.shape[0]
    widths = dict(theta=k, x=n, x_hat=n, x_tilde=n, u_bl=m, u=m, u_total=m, sigma=n, sigma_hat=n,
                  sigma_hat_c=n, sigma_hat_m=m, sigma_hat_um=n - m, eta2_hat=m, y=p)
    return SimTrace(np.zeros(0), {c: np.zeros((0, widths[c])) for c in FIELDS}, _meta(s, kind), False)


def _meta(s: Scenario, kind: str) -> dict:
    return {"system": kind, "scenario": s.describe(), "scenario_hash": s.digest(),
            "integrator": "rk4-fixed", "step": s.h}


def _signals(s: Scenario, t, x, u_state, sig_hat, sig_hat_c, xH):
    """Derived columns shared by the traces."""
    loop = s.loop
    n, m = loop.n, loop.m
    th = s.thetas(t)
    r = s.reference(t)
    B = loop.model.B.eval_batch(th)
    Kx = loop.Kx.eval_batch(th)
    Kr = loop.Kr.eval_batch(th)
    C = loop.model.C.eval_batch(th)
    u_bl = np.einsum("jab,jb->ja", Kx, x)
    u = u_state + (_ff_scale(s) * np.einsum("jab,jb->ja", Kr, r) if s.mode == UNFILTERED else 0.0)
    u_total = u_bl + u
    fx = np.array([s.uncertainty(ti, xi) for ti, xi in zip(t, x)]).reshape(len(t), n)
    sigma = np.einsum("jab,jb->ja", B @ (s.omega - np.eye(m)), u_total) + fx
    S = loop.Bbar_inv_batch(th)
    dec = np.einsum("jab,jb->ja", S, sig_hat_c)
    eta2 = np.zeros((len(t), m))
    if s.compensation == "full" and s.Hbar.order >= 0:
        AH, BH, CH, DH = s.Hbar.eval_batch(th)
        eta2 = np.einsum("jab,jb->ja", CH, xH) + np.einsum("jab,jb->ja", DH, dec[:, m:])
    y = np.einsum("jab,jb->ja", C, x)
    return dict(theta=th, u_bl=u_bl, u=u, u_total=u_total, sigma=sigma, sigma_hat_m=dec[:, :m],
                sigma_hat_um=dec[:, m:], eta2_hat=eta2, y=y)


def simulate_closed_loop(s: Scenario) -> SimTrace:
    """Plant + predictor + estimator + control law + compensator."""
    n, m = s.loop.n, s.loop.m
    if s.n_steps == 0:
        return _empty_trace(s, "adaptive")
    nh = s.Hbar.order if s.compensation == "full" else 0
    z0 = np.concatenate([s.x0, s.x_hat0, np.zeros(m), np.zeros(nh)])

    def build(times):
        return _adaptive_blocks(s, s.thetas(times), s.reference(times), reference_system=False)

    t, Z, Hd, div = _integrate(s, z0, build, n, True, True)
    x, xh, us = Z[:, :n], Z[:, n:2 * n], Z[:, 2 * n:2 * n + m]
    xH = Z[:, 2 * n + m:]
    sig_hat, sig_c = Hd[:, :n], Hd[:, n:]
    if s.compensation in ("none", "baseline"):
        sig_c_used = np.zeros_like(sig_c)
    else:
        sig_c_used = sig_c
    cols = _signals(s, t, x, us, sig_hat, sig_c_used, xH)
    cols.update(x=x, x_hat=xh, x_tilde=xh - x, sigma_hat=sig_hat, sigma_hat_c=sig_c)
    return SimTrace(t, {k: cols[k] for k in FIELDS}, _meta(s, "adaptive"), div)


def simulate_reference(s: Scenario) -> SimTrace:
    """Non-implementable reference loop driven by the true lumped uncertainty (analysis only)."""
    n, m = s.loop.n, s.loop.m
    if s.n_steps == 0:
        return _empty_trace(s, "reference")
    nh = s.Hbar.order if s.compensation == "full" else 0
    z0 = np.concatenate([s.x0, np.zeros(m), np.zeros(nh)])

    def build(times):
        return _adaptive_blocks(s, s.thetas(times), s.reference(times), reference_system=True)

    t, Z, _, div = _integrate(s, z0, build, n, True, False)
    x, us, xH = Z[:, :n], Z[:, n:n + m], Z[:, n + m:]
    th = s.thetas(t)
    B = s.loop.model.B.eval_batch(th)
    Kx = s.loop.Kx.eval_batch(th)
    Kr = s.loop.Kr.eval_batch(th)
    u_out = us + (_ff_scale(s) * np.einsum("jab,jb->ja", Kr, s.reference(t)) if s.mode == UNFILTERED else 0.0)
    u_total = np.einsum("jab,jb->ja", Kx, x) + u_out
    fx = np.array([s.uncertainty(ti, xi) for ti, xi in zip(t, x)]).reshape(len(t), n)
    sigma = np.einsum("jab,jb->ja", B @ (s.omega - np.eye(m)), u_total) + fx
    sig_used = sigma if s.compensation not in ("none", "baseline") else np.zeros_like(sigma)
    cols = _signals(s, t, x, us, sigma, sig_used, xH)
    nanx = np.full_like(x, np.nan)
    cols.update(x=x, x_hat=nanx, x_tilde=nanx, sigma_hat=sigma, sigma_hat_c=sig_used)
    meta = _meta(s, "reference")
    meta["implementable"] = False
    return SimTrace(t, {k: cols[k] for k in FIELDS}, meta, div)


def simulate_ideal(s: Scenario) -> SimTrace:
    """x_id' = A_m x_id + B K_r r; y_id = C x_id."""
    n, m = s.loop.n, s.loop.m
    if s.n_steps == 0:
        return _empty_trace(s, "ideal")

    def build(times):
        return _ideal_blocks(s, s.thetas(times), s.reference(times))

    t, Z, _, div = _integrate(s, s.x0.copy(), build, n, False, False)
    th = s.thetas(t)
    x = Z
    Kx = s.loop.Kx.eval_batch(th)
    Kr = s.loop.Kr.eval_batch(th)
    u = np.einsum("jab,jb->ja", Kr, s.reference(t))
    u_bl = np.einsum("jab,jb->ja", Kx, x)
    y = np.einsum("jab,jb->ja", s.loop.model.C.eval_batch(th), x)
    zn, zm = np.zeros((len(t), n)), np.zeros((len(t), m))
    cols = dict(theta=th, x=x, x_hat=np.full_like(x, np.nan), x_tilde=np.full_like(x, np.nan), u_bl=u_bl,
                u=u, u_total=u_bl + u, sigma=zn, sigma_hat=zn, sigma_hat_c=zn, sigma_hat_m=zm,
                sigma_hat_um=np.zeros((len(t), n - m)), eta2_hat=zm, y=y)
    return SimTrace(t, {k: cols[k] for k in FIELDS}, _meta(s, "ideal"), div)


def compare(a: SimTrace, b: SimTrace, skip: float = 0.0, columns=None) -> dict:
    """Sup-norm and RMS of per-column differences over t >= skip (traces on a common time grid)."""
    n = min(len(a.t), len(b.t))
    if n and not np.allclose(a.t[:n], b.t[:n]):
        raise ValueError("traces are not sampled on the same grid")
    mask = a.t[:n] >= skip - 1e-12
    out = {"skip": skip, "samples": int(mask.sum()), "columns": {}}
    names = columns or [c for c in a.columns if c in b.columns]
    for c in names:
        d = a[c][:n][mask] - b[c][:n][mask]
        d = d[:, np.all(np.isfinite(d), axis=0)] if d.ndim == 2 and d.size else d
        if d.size == 0:
            continue
        norms = np.linalg.norm(d, axis=1)
        out["columns"][c] = {
            "sup": float(np.max(np.abs(d))) if d.size else 0.0,
            "sup_norm": float(norms.max()) if len(norms) else 0.0,
            "rms": float(np.sqrt(np.mean(norms ** 2))) if len(norms) else 0.0,
            "sup_per_channel": np.max(np.abs(d), axis=0).tolist(),
        }
    for tr, key in ((a, "a"), (b, "b")):
        if "sigma_hat_c" in tr.columns and "sigma" in tr.columns and len(tr.t):
            T = tr.meta.get("scenario", {}).get("T", 0.0)
            sel = tr.t >= max(skip, T) - 1e-12
            e = np.linalg.norm(tr["sigma_hat_c"][sel] - tr["sigma"][sel], axis=1)
            if e.size:
                out[f"estimation_error_{key}"] = float(e.max())
    return out


def sup_error(a: SimTrace, b: SimTrace, column: str = "x", index: int = 0, skip: float = 0.0) -> float:
    n = min(len(a.t), len(b.t))
    mask = a.t[:n] >= skip - 1e-12
    return float(np.max(np.abs(a[column][:n, index][mask] - b[column][:n, index][mask])))


def estimation_error(tr: SimTrace, skip: float | None = None) -> float:
    """sup ||sigma_hat_c - sigma|| over t >= skip (default 2T)."""
    T = tr.meta["scenario"]["T"]
    skip = 2 * T if skip is None else skip
    sel = tr.t >= skip - 1e-12
    return float(np.linalg.norm(tr["sigma_hat_c"][sel] - tr["sigma"][sel], axis=1).max())

"""Unmatched-uncertainty attenuation: generalized plant and PPG feedforward synthesis."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lmi import (VERIFY_TOL, Certificate, InfeasibleError, LmiFamily, LpvStateSpace, _T, _extra,
                  ppg_bound, solve_family, sym_block)
from .lpv import FunctionMatrix, ParamDomain, ParamMatrix
from .realize import BaselineLoop, Compensator

log = logging.getLogger(__name__)


def static_weight(W, ntheta: int) -> LpvStateSpace:
    """A memoryless weight z = W v as an order-zero LpvStateSpace."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    nz, nv = W.shape
    return LpvStateSpace(lambda th, w=None: (np.zeros((0, 0)), np.zeros((0, nv)), np.zeros((nz, 0)), W),
                         0, nv, nz, ntheta, "W")


@dataclass
class GeneralizedPlant:
    """Channels: w = sigma_um (n-m), u = u_um (m), z (n_z), y = w."""

    func: object
    n: int
    nbar: int
    nw: int
    nu: int
    nz: int
    ntheta: int

    def eval(self, theta):
        return self.func(np.asarray(theta, dtype=float))

    def open_loop(self) -> LpvStateSpace:
        """Map w -> z with u = 0."""
        def f(th, w=None):
            Ab, B1, B2, C1, D11, D12, C2, D21 = self.eval(th)
            return Ab, B1, C1, D11
        return LpvStateSpace(f, self.nbar, self.nw, self.nz, self.ntheta, "H_xum->z")


def build_generalized_plant(A_m, B, B_u, C, W: LpvStateSpace) -> GeneralizedPlant:
    """Block realization with state [x_um; x_m; x_W].

    The weight is driven by C(theta)(x_um + x_m).  When W takes the full state
    (W.nin == n) and C is not n x n, the identity is used in place of C.
    """
    n = A_m.shape[0]
    m = B.shape[1]
    k = B_u.shape[1]
    if k != n - m:
        raise ValueError("B_u must have n - m columns")
    if W.nin == C.shape[0]:
        feed = C
    elif W.nin == n:
        feed = None
    else:
        raise ValueError(f"weight has {W.nin} inputs; expected {C.shape[0]} or {n}")
    nW = W.n
    nbar = 2 * n + nW
    ntheta = getattr(A_m, "ntheta", 0)

    def f(th):
        Am, Bt, Bu = A_m.eval(th), B.eval(th), B_u.eval(th)
        Cf = np.eye(n) if feed is None else feed.eval(th)
        AW, BW, CW, DW = W.eval(th)
        Ab = np.zeros((nbar, nbar))
        Ab[:n, :n] = Am
        Ab[n:2 * n, n:2 * n] = Am
        Ab[2 * n:, :n] = BW @ Cf
        Ab[2 * n:, n:2 * n] = BW @ Cf
        Ab[2 * n:, 2 * n:] = AW
        B1 = np.vstack([Bu, np.zeros((n + nW, k))])
        B2 = np.vstack([np.zeros((n, m)), Bt, np.zeros((nW, m))])
        C1 = np.hstack([DW @ Cf, DW @ Cf, CW])
        nz = C1.shape[0]
        D11 = np.zeros((nz, k))
        D12 = np.zeros((nz, m))
        C2 = np.zeros((k, nbar))
        D21 = np.eye(k)
        return Ab, B1, B2, C1, D11, D12, C2, D21

    return GeneralizedPlant(f, n, nbar, k, m, W.nout, ntheta)


def _synthesis_family(plant: GeneralizedPlant, d: ParamDomain, mu: float,
                      bandwidth: float | None = None, feedthrough: float | None = None) -> LmiFamily:
    """Synthesis LMIs at fixed mu, minimizing gamma.

    With ``bandwidth`` = r set, X - Y >= tau I and |Ahat|, |Chat| <= r tau are
    imposed, so the recovered A_H = Ahat (X-Y)^{-1} and C_H have norm <= r
    whatever the scale of the solution.  ``feedthrough`` bounds |D_H| = |Dhat|.
    """
    nb, nw, nu, nz = plant.nbar, plant.nw, plant.nu, plant.nz
    rates = d.rate_vertices()
    I_nb, I_w, I_z = np.eye(nb), np.eye(nw), np.eye(nz)
    Z_wnb = np.zeros((nw, nb))

    def declare(prob):
        k = d.ntheta
        return {
            "X": prob.affine_sym("X", nb, k), "Y": prob.affine_sym("Y", nb, k),
            "Ah": prob.affine_mat("Ahat", nb, nb, k), "Bh": prob.affine_mat("Bhat", nb, nw, k),
            "Ch": prob.affine_mat("Chat", nu, nb, k), "Dh": prob.affine_mat("Dhat", nu, nw, k),
        }

    def instances(h, th):
        Ab, B1, B2, C1, D11, D12, C2, D21 = plant.eval(th)
        out = []
        for rd in rates:
            def l1(v, rd=rd):
                X, Y = h["X"].at(v, th), h["Y"].at(v, th)
                Xd, Yd = h["X"].rate(v, rd), h["Y"].rate(v, rd)
                Ah, Bh, Ch, Dh = (h[key].at(v, th) for key in ("Ah", "Bh", "Ch", "Dh"))
                S11 = Ab @ X - B2 @ Ch
                M11 = -Xd + S11 + _T(S11) + mu * X
                M21 = Ab @ X - B2 @ Ch - Ah + Y @ Ab.T + mu * Y - Yd
                M22 = -Yd + Ab @ Y + Y @ Ab.T + mu * Y
                M31 = _T(B1 + B2 @ Dh @ D21)
                M32 = _T(B1 + B2 @ Dh @ D21 + Bh @ D21)
                return sym_block([[M11], [M21, M22], [M31, M32, -v["upsilon"] * I_w]])
            out.append(("syn1", "<", l1))

        def l2(v):
            X, Y = h["X"].at(v, th), h["Y"].at(v, th)
            Ch, Dh = h["Ch"].at(v, th), h["Dh"].at(v, th)
            return sym_block([[mu * X], [mu * Y, mu * Y], [Z_wnb, Z_wnb, (v["gamma"] - v["upsilon"]) * I_w],
                              [C1 @ X - D12 @ Ch, C1 @ Y, D11 + D12 @ Dh @ D21, v["gamma"] * I_z]])
        out.append(("syn2", ">", l2))
        if bandwidth is not None:
            out.append(("sep", ">", lambda v: h["X"].at(v, th) - h["Y"].at(v, th) - v["tau"] * I_nb))
            for key, r, c in (("Ah", nb, nb), ("Ch", nu, nb)):
                def nrm(v, key=key, r=r, c=c):
                    M = h[key].at(v, th)
                    bt = bandwidth * v["tau"]
                    return sym_block([[bt * np.eye(c)], [M, bt * np.eye(r)]])
                out.append(("norm_" + key, ">", nrm))
        if feedthrough is not None:
            def dnorm(v):
                Dh = h["Dh"].at(v, th)
                return sym_block([[feedthrough * I_w], [Dh, feedthrough * np.eye(nu)]])
            out.append(("norm_Dh", ">", dnorm))
        return out

    def finalize(prob, h):
        prob.add_linear({"gamma": 1.0}, 0.0, ">=", "gamma>=0")
        prob.add_linear({"tau": 1.0}, 0.0, ">=", "tau>=0")
        prob.minimize({"gamma": 1.0})

    fam = LmiFamily(declare, instances, finalize)
    return fam


def _declare_with_scalars(fam: LmiFamily) -> LmiFamily:
    def declare(prob):
        h = fam.declare(prob)
        prob.scalar("gamma")
        prob.scalar("upsilon")
        prob.scalar("tau")
        return h
    return LmiFamily(declare, fam.instances, fam.finalize)


def controller_from_certificate(cert: Certificate, cond_max: float = 1e10) -> Compensator:
    """A_H = Ahat (X-Y)^{-1}, B_H = Bhat, C_H = Chat (X-Y)^{-1}, D_H = Dhat (as synthesized)."""
    coefs = cert.coefficients
    X, Y = ParamMatrix.from_affine(coefs["X"]), ParamMatrix.from_affine(coefs["Y"])
    Ah, Bh = ParamMatrix.from_affine(coefs["Ahat"]), ParamMatrix.from_affine(coefs["Bhat"])
    Ch, Dh = ParamMatrix.from_affine(coefs["Chat"]), ParamMatrix.from_affine(coefs["Dhat"])
    k = X.ntheta
    nb = X.shape[0]
    nw, nu = Bh.shape[1], Ch.shape[0]

    def solve_right(M, ths):
        # M (X - Y)^{-1} computed as a transposed solve
        S = X.eval_batch(ths) - Y.eval_batch(ths)
        return np.swapaxes(np.linalg.solve(S, np.swapaxes(M.eval_batch(ths), 1, 2)), 1, 2)

    AH = FunctionMatrix(lambda th: solve_right(Ah, th[None])[0], (nb, nb), k,
                        batch=lambda ths: solve_right(Ah, ths), name="A_H")
    CH = FunctionMatrix(lambda th: solve_right(Ch, th[None])[0], (nu, nb), k,
                        batch=lambda ths: solve_right(Ch, ths), name="C_H")
    pts = np.vstack([cert.points(), cert.check_points()])
    S = X.eval_batch(pts) - Y.eval_batch(pts)
    cond = np.linalg.cond(S)
    if np.any(np.linalg.eigvalsh(S)[:, 0] <= 0):
        raise InfeasibleError("X - Y is not positive definite on the certificate grid")
    if cond.max() > cond_max:
        raise InfeasibleError(f"X - Y condition number {cond.max():.3e} exceeds {cond_max:.0e}")
    return Compensator(AH, Bh, CH, Dh, nb, nw, nu, k)


def negate_output(H: Compensator) -> Compensator:
    neg = lambda M: FunctionMatrix(lambda th: -M.eval(th), M.shape, H.ntheta,
                                   batch=lambda ths: -M.eval_batch(ths), name="neg")
    return Compensator(H.A, H.B, neg(H.C), neg(H.D), H.order, H.nin, H.nout, H.ntheta)


def closed_loop(plant: GeneralizedPlant, H: Compensator) -> LpvStateSpace:
    """Generalized plant in feedback with the synthesized controller: w -> z."""
    nb, nh = plant.nbar, H.order

    def f(th, w=None):
        Ab, B1, B2, C1, D11, D12, C2, D21 = plant.eval(th)
        AH, BH, CH, DH = H.eval(th)
        A = np.block([[Ab + B2 @ DH @ C2, B2 @ CH], [BH @ C2, AH]])
        B = np.vstack([B1 + B2 @ DH @ D21, BH @ D21])
        C = np.hstack([C1 + D12 @ DH @ C2, D12 @ CH])
        D = D11 + D12 @ DH @ D21
        return A, B, C, D

    return LpvStateSpace(f, nb + nh, plant.nw, plant.nz, plant.ntheta, "T_zw")


def synthesize_uua(plant: GeneralizedPlant, d: ParamDomain, mu_grid: Sequence[float] | None = None,
                   verify: bool = True, reverify: bool = True, margin: float = 1e-6,
                   reverify_mu=None, bandwidth: float | None = 200.0,
                   feedthrough: float | None = None):
    """Minimal-gamma feedforward controller over a mu line search.

    Returns (Hbar, gamma, certificate).  ``Hbar`` is the compensator in the sign
    convention of the runtime control law (its output is subtracted through the
    filter), i.e. the synthesized controller with negated output matrices.
    ``bandwidth`` bounds the norms of A_H and C_H (None leaves them free, which
    typically yields a stiff, nearly singular realization).
    """
    if mu_grid is None:
        decay = plant.open_loop().decay_rate(d.grid_points())
        mu_grid = np.geomspace(0.05, 1.96 * decay, 12)
    grid = d.grid_points()
    scan = []
    solved = {}
    for mu in mu_grid:
        fam = _declare_with_scalars(_synthesis_family(plant, d, float(mu), bandwidth, feedthrough))
        fr = solve_family(fam, grid, None, margin=margin)
        solved[float(mu)] = fr
        g = float(fr.result.values["gamma"][0, 0]) if fr.ok else np.inf
        scan.append({"mu": float(mu), "status": fr.result.status, "gamma": g})
        log.debug("synthesis mu=%.4g status=%s gamma=%.6g", mu, fr.result.status, g)
    order = sorted((s for s in scan if np.isfinite(s["gamma"])), key=lambda s: (s["gamma"], s["mu"]))
    if not order:
        raise InfeasibleError("UUA synthesis LMIs infeasible for every mu", scan)
    check = d.refined(2).grid_points() if verify else None
    for cand in order[:3]:
        mu = cand["mu"]
        fam = _declare_with_scalars(_synthesis_family(plant, d, mu, bandwidth, feedthrough))
        fr = solve_family(fam, grid, check, margin=margin, initial=solved[mu])
        if not fr.ok or (verify and fr.verify_residual > VERIFY_TOL):
            continue
        vals = fr.result.values
        h = fr.handles
        coefs = {name: h[key].coefficients(vals) for key, name in
                 (("X", "X"), ("Y", "Y"), ("Ah", "Ahat"), ("Bh", "Bhat"), ("Ch", "Chat"), ("Dh", "Dhat"))}
        gamma = float(vals["gamma"][0, 0])
        cert = Certificate(
            kind="synthesis", coefficients=coefs,
            scalars={"mu": mu, "gamma": gamma, "upsilon": float(vals["upsilon"][0, 0]),
                     "bandwidth": float(bandwidth) if bandwidth is not None else None,
                     "feedthrough": float(feedthrough) if feedthrough is not None else None},
            domain=d, extra_points=_extra(fr.extra, d), omega_vertices=[],
            solve_residual=fr.result.max_residual, verify_residual=fr.verify_residual,
            verify_counts=d.refined(2).grid_counts, eps=fr.margin, mu_scan=scan,
            meta={"sign_convention": "runtime compensator output = -(synthesized controller output)"},
        )
        H_syn = controller_from_certificate(cert)
        if reverify:
            cl = closed_loop(plant, H_syn)
            mus = reverify_mu if reverify_mu is not None else sorted({mu, *(0.5 * mu, 0.75 * mu)})
            try:
                g_cl, cl_cert = ppg_bound(cl, d, None, mus, verify=verify, margin=margin)
            except InfeasibleError:
                g_cl = np.inf
            cert.scalars["gamma_cl"] = float(g_cl)
            cert.meta["reverify_ratio"] = float(g_cl / gamma) if gamma > 0 else None
            log.info("UUA synthesis gamma=%.5g, closed-loop re-verification gamma=%.5g", gamma, g_cl)
        return negate_output(H_syn), gamma, cert
    raise InfeasibleError("no synthesis certificate survived refined-grid verification", scan)

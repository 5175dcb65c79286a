"""Closed-loop data and composite state-space realizations used by the analysis."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .lmi import LpvStateSpace
from .lpv import (FunctionMatrix, LpvModel, NullComplement, ParamDomain, ParamMatrix,
                  left_pinv, null_complement, param_add, param_matmul)


def feedforward_gain(A_m, B, C, d: ParamDomain | None = None, cond_max: float = 1e12) -> FunctionMatrix:
    """K_r(theta) = -(C A_m^{-1} B)^{-1}; checked nonsingular on the grid of ``d``."""
    m, p = B.shape[1], C.shape[0]
    if m != p:
        raise ValueError("feedforward gain needs a square channel (m == p)")

    def batch(ths):
        Am, Bb, Cb = A_m.eval_batch(ths), B.eval_batch(ths), C.eval_batch(ths)
        G = Cb @ np.linalg.solve(Am, Bb)
        return -np.linalg.inv(G)

    def one(th):
        return batch(th[None, :])[0]

    Kr = FunctionMatrix(one, (m, p), A_m.ntheta, batch=batch, name="K_r")
    if d is not None:
        ths = d.grid_points()
        Am = A_m.eval_batch(ths)
        if np.any(np.linalg.cond(Am) > cond_max):
            raise ValueError("A_m is singular at a grid point")
        G = C.eval_batch(ths) @ np.linalg.solve(Am, B.eval_batch(ths))
        if np.any(np.linalg.cond(G) > cond_max):
            raise ValueError("DC-gain matrix C A_m^{-1} B is singular at a grid point")
    return Kr


@dataclass
class Compensator:
    """Realization of the unmatched-uncertainty feedforward map H(theta).

    Matrices are callables of theta; ``order`` states, (n - m) inputs, m outputs.
    """

    A: object
    B: object
    C: object
    D: object
    order: int
    nin: int
    nout: int
    ntheta: int

    @classmethod
    def zero(cls, nin: int, nout: int, ntheta: int) -> "Compensator":
        z = lambda r, c: ParamMatrix(np.zeros((r, c)), (), ntheta)
        return cls(z(0, 0), z(0, nin), z(nout, 0), z(nout, nin), 0, nin, nout, ntheta)

    def eval(self, theta):
        return self.A.eval(theta), self.B.eval(theta), self.C.eval(theta), self.D.eval(theta)

    def eval_batch(self, thetas):
        return (self.A.eval_batch(thetas), self.B.eval_batch(thetas),
                self.C.eval_batch(thetas), self.D.eval_batch(thetas))

    def as_system(self, name: str = "Hbar") -> LpvStateSpace:
        return LpvStateSpace(lambda th, w=None: self.eval(th), self.order, self.nin, self.nout,
                             self.ntheta, name)


@dataclass
class BaselineLoop:
    """Plant plus baseline state feedback; provides A_m, K_r, B_u and pseudo-inverses."""

    model: LpvModel
    Kx: object
    Bu_override: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.model.n

    @property
    def m(self):
        return self.model.m

    @property
    def ntheta(self):
        return self.model.ntheta

    @property
    def domain(self) -> ParamDomain:
        return self.model.domain

    @cached_property
    def Am(self):
        return param_add(self.model.A, param_matmul(self.model.B, self.Kx))

    @cached_property
    def Kr(self) -> FunctionMatrix:
        return feedforward_gain(self.Am, self.model.B, self.model.C, self.domain)

    @cached_property
    def Bu(self):
        if self.Bu_override is not None:
            return self.Bu_override
        return null_complement(self.model.B, self.domain)

    @cached_property
    def Bdag(self) -> FunctionMatrix:
        B = self.model.B
        return FunctionMatrix(lambda th: left_pinv(B.eval(th)), (self.m, self.n), self.ntheta,
                              batch=lambda ths: left_pinv(B.eval_batch(ths)), name="B_dag")

    @cached_property
    def Budag(self) -> FunctionMatrix:
        Bu = self.Bu
        k = self.n - self.m
        return FunctionMatrix(lambda th: left_pinv(Bu.eval(th)), (k, self.n), self.ntheta,
                              batch=lambda ths: left_pinv(Bu.eval_batch(ths)), name="Bu_dag")

    def Bbar_inv_batch(self, thetas):
        Bb = np.concatenate([self.model.B.eval_batch(thetas), self.Bu.eval_batch(thetas)], axis=2)
        return np.linalg.inv(Bb)


# ---------------------------------------------------------------------------
# composite maps (omega enters affinely through the filter)


def _K(K, m):
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape == (1, 1) and m > 1:
        K = K[0, 0] * np.eye(m)
    return K


def _w(omega, m):
    return np.eye(m) if omega is None else np.atleast_2d(np.asarray(omega, dtype=float))


def realize_Gxm(loop: BaselineLoop, K, d: ParamDomain | None = None, output=None) -> LpvStateSpace:
    """H_xm (I - C): states [x; x_c]."""
    n, m = loop.n, loop.m
    K = _K(K, m)

    def f(th, w):
        Am, B = loop.Am.eval(th), loop.model.B.eval(th)
        wK = _w(w, m) @ K
        A = np.block([[Am, -B @ wK], [np.zeros((m, n)), -wK]])
        Bs = np.vstack([B, np.eye(m)])
        Cs = np.hstack([np.eye(n), np.zeros((n, m))])
        if output is not None:
            Cs = output.eval(th) @ Cs
        return A, Bs, Cs, np.zeros((Cs.shape[0], m))

    nout = n if output is None else output.shape[0]
    return LpvStateSpace(f, n + m, m, nout, loop.ntheta, "G_xm" if output is None else "G_m", True)


def realize_HxmCKr(loop: BaselineLoop, K, Kr=None, d: ParamDomain | None = None,
                   minus_identity: bool = False, output=None) -> LpvStateSpace:
    """H_xm C K_r (or H_xm (C - I) K_r): states [x; x_c]."""
    n, m = loop.n, loop.m
    K = _K(K, m)
    Kr = Kr or loop.Kr
    p = Kr.shape[1]

    def f(th, w):
        Am, B, Krt = loop.Am.eval(th), loop.model.B.eval(th), Kr.eval(th)
        wK = _w(w, m) @ K
        A = np.block([[Am, B @ wK], [np.zeros((m, n)), -wK]])
        top = -B @ Krt if minus_identity else np.zeros((n, p))
        Bs = np.vstack([top, Krt])
        Cs = np.hstack([np.eye(n), np.zeros((n, m))])
        if output is not None:
            Cs = output.eval(th) @ Cs
        return A, Bs, Cs, np.zeros((Cs.shape[0], p))

    nout = n if output is None else output.shape[0]
    name = "H_xm(C-I)K_r" if minus_identity else "H_xmCK_r"
    return LpvStateSpace(f, n + m, p, nout, loop.ntheta, name, True)


def realize_Gxum(loop: BaselineLoop, K, Hbar: Compensator, d: ParamDomain | None = None,
                 output=None) -> LpvStateSpace:
    """H_xum - H_xm C Hbar: states [x_um; x_H; x_c; x_m], output x_um - x_m."""
    n, m = loop.n, loop.m
    k = n - m
    nh = Hbar.order
    K = _K(K, m)

    def f(th, w):
        Am, B, Bu = loop.Am.eval(th), loop.model.B.eval(th), loop.Bu.eval(th)
        AH, BH, CH, DH = Hbar.eval(th)
        wK = _w(w, m) @ K
        N = 2 * n + nh + m
        A = np.zeros((N, N))
        i_um, i_h, i_c, i_m = 0, n, n + nh, n + nh + m
        A[i_um:i_h, i_um:i_h] = Am
        A[i_h:i_c, i_h:i_c] = AH
        A[i_c:i_m, i_h:i_c] = CH
        A[i_c:i_m, i_c:i_m] = -wK
        A[i_m:, i_c:i_m] = B @ wK
        A[i_m:, i_m:] = Am
        Bs = np.zeros((N, k))
        Bs[i_um:i_h] = Bu
        Bs[i_h:i_c] = BH
        Bs[i_c:i_m] = DH
        Cs = np.zeros((n, N))
        Cs[:, i_um:i_h] = np.eye(n)
        Cs[:, i_m:] = -np.eye(n)
        if output is not None:
            Cs = output.eval(th) @ Cs
        return A, Bs, Cs, np.zeros((Cs.shape[0], k))

    nout = n if output is None else output.shape[0]
    return LpvStateSpace(f, 2 * n + nh + m, k, nout, loop.ntheta, "G_xum" if output is None else "G_um", True)


def realize_Hxm(loop: BaselineLoop) -> LpvStateSpace:
    n = loop.n
    return LpvStateSpace(lambda th, w=None: (loop.Am.eval(th), loop.model.B.eval(th), np.eye(n),
                                             np.zeros((n, loop.m))),
                         n, loop.m, n, loop.ntheta, "H_xm")


def realize_Hxum(loop: BaselineLoop, W=None) -> LpvStateSpace:
    """Uncompensated map sigma_um -> x (or -> W x for a static weight W)."""
    n, k = loop.n, loop.n - loop.m

    def f(th, w=None):
        C = np.eye(n) if W is None else np.asarray(W.eval(th) if hasattr(W, "eval") else W, dtype=float)
        return loop.Am.eval(th), loop.Bu.eval(th), C, np.zeros((C.shape[0], k))

    nout = n if W is None else np.asarray(W.eval(np.zeros(loop.ntheta)) if hasattr(W, "eval") else W).shape[0]
    return LpvStateSpace(f, n, k, nout, loop.ntheta, "H_xum")


def realize_filter_inv(m: int, K, ntheta: int, Kr=None, minus_identity: bool = False) -> LpvStateSpace:
    """omega^{-1} C = K (sI + omega K)^{-1}; optionally (omega^{-1} C - I) K_r."""
    K = _K(K, m)

    def f(th, w):
        wK = _w(w, m) @ K
        if Kr is None:
            return -wK, np.eye(m), K, np.zeros((m, m))
        Krt = Kr.eval(th)
        D = -Krt if minus_identity else np.zeros_like(Krt)
        return -wK, Krt, K, D

    nin = m if Kr is None else Kr.shape[1]
    name = "w^-1 C" if Kr is None else ("(w^-1 C - I)K_r" if minus_identity else "w^-1 C K_r")
    return LpvStateSpace(f, m, nin, m, ntheta, name, True)


def realize_filter_inv_H(m: int, K, Hbar: Compensator) -> LpvStateSpace:
    """omega^{-1} C Hbar: states [x_H; x_c]."""
    K = _K(K, m)
    nh = Hbar.order

    def f(th, w):
        AH, BH, CH, DH = Hbar.eval(th)
        wK = _w(w, m) @ K
        A = np.block([[AH, np.zeros((nh, m))], [CH, -wK]])
        Bs = np.vstack([BH, DH])
        Cs = np.hstack([np.zeros((m, nh)), K])
        return A, Bs, Cs, np.zeros((m, Hbar.nin))

    return LpvStateSpace(f, nh + m, Hbar.nin, m, Hbar.ntheta, "w^-1 C Hbar", True)


def realize_F(loop: BaselineLoop, K, Hbar: Compensator) -> LpvStateSpace:
    """C (B^+ + Hbar B_u^+): input sigma_tilde (n), output m; states [x_H; x_c]."""
    n, m = loop.n, loop.m
    K = _K(K, m)
    nh = Hbar.order

    def f(th, w):
        AH, BH, CH, DH = Hbar.eval(th)
        Bd, Bud = loop.Bdag.eval(th), loop.Budag.eval(th)
        wK = _w(w, m) @ K
        A = np.block([[AH, np.zeros((nh, m))], [CH, -wK]])
        Bs = np.vstack([BH @ Bud, Bd + DH @ Bud])
        Cs = np.hstack([np.zeros((m, nh)), wK])
        return A, Bs, Cs, np.zeros((m, n))

    return LpvStateSpace(f, nh + m, n, m, loop.ntheta, "F", True)

"""Small semidefinite-programming layer on top of Clarabel.

Constraints are given as Python functions that build a symmetric block from
decision-variable values.  Each block function must be affine in the decision
variables; its coefficient matrices are recovered by probing it with the zero
vector and every unit vector at once (the values arrive with a leading batch
axis, so ordinary numpy matmul broadcasting does the work).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

import clarabel

SQRT2 = math.sqrt(2.0)


class SolverError(RuntimeError):
    pass


@dataclass
class _Var:
    name: str
    kind: str  # scalar | sym | mat
    shape: tuple[int, int]
    offset: int
    size: int


def _tri(n: int):
    """Column-major upper-triangle index pairs (Clarabel's svec ordering)."""
    i, j = np.tril_indices(n)
    return j, i  # rows <= cols, ordered by column


def svec(M: np.ndarray) -> np.ndarray:
    n = M.shape[-1]
    r, c = _tri(n)
    scale = np.where(r == c, 1.0, SQRT2)
    return M[..., r, c] * scale


class AffineVar:
    """Decision matrix V(theta) = V0 + sum_i theta_i V_i."""

    def __init__(self, names: list[str]):
        self.names = names

    @property
    def ntheta(self) -> int:
        return len(self.names) - 1

    def at(self, vals: dict, theta) -> np.ndarray:
        out = vals[self.names[0]]
        for t, nm in zip(theta, self.names[1:]):
            if t != 0.0:
                out = out + t * vals[nm]
        return out

    def rate(self, vals: dict, theta_dot) -> np.ndarray:
        out = np.zeros_like(vals[self.names[0]])
        for t, nm in zip(theta_dot, self.names[1:]):
            if t != 0.0:
                out = out + t * vals[nm]
        return out

    def coefficients(self, vals: dict) -> list[np.ndarray]:
        return [np.asarray(vals[nm]) for nm in self.names]


@dataclass
class Lmi:
    func: Callable[[dict], np.ndarray]
    sense: str  # "<" (negative definite) or ">" (positive definite)
    tag: str
    size: int
    F0: np.ndarray | None = None
    cols: sp.csc_matrix | None = None  # svec(F_k) as columns


@dataclass
class SdpResult:
    status: str
    x: np.ndarray | None
    values: dict
    objective: float
    max_residual: float
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "solved"


def block_residual(F: np.ndarray, sense: str) -> float:
    """Largest eigenvalue violating the requested definiteness (<= 0 means satisfied)."""
    F = 0.5 * (F + F.T)
    ev = np.linalg.eigvalsh(F)
    return float(ev[-1]) if sense == "<" else float(-ev[0])


SOLVER_TOL = 1e-8


def solver_threads() -> int:
    try:
        return max(1, int(os.environ.get("LPVL1_SOLVER_THREADS", "1")))
    except ValueError:
        return 1


class SdpProblem:
    """Decision variables, LMI blocks, linear constraints and a linear objective."""

    def __init__(self, margin: float = 1e-6):
        self.vars: dict[str, _Var] = {}
        self.nvar = 0
        self.lmis: list[Lmi] = []
        self.lin: list[tuple[np.ndarray, float, str]] = []  # a.x <= b
        self.eq: list[tuple[np.ndarray, float]] = []
        self.c = None
        self.margin = margin
        self._probe_cache = None

    # variables --------------------------------------------------------------
    def _add(self, name, kind, shape, size) -> str:
        if name in self.vars:
            raise ValueError(f"duplicate variable {name}")
        self.vars[name] = _Var(name, kind, shape, self.nvar, size)
        self.nvar += size
        self._probe_cache = None
        return name

    def scalar(self, name: str) -> str:
        return self._add(name, "scalar", (1, 1), 1)

    def sym(self, name: str, n: int) -> str:
        return self._add(name, "sym", (n, n), n * (n + 1) // 2)

    def mat(self, name: str, r: int, c: int) -> str:
        return self._add(name, "mat", (r, c), r * c)

    def affine_sym(self, name: str, n: int, ntheta: int) -> AffineVar:
        return AffineVar([self.sym(f"{name}#{i}", n) for i in range(ntheta + 1)])

    def affine_mat(self, name: str, r: int, c: int, ntheta: int) -> AffineVar:
        return AffineVar([self.mat(f"{name}#{i}", r, c) for i in range(ntheta + 1)])

    def index(self, name: str) -> int:
        v = self.vars[name]
        if v.kind != "scalar":
            raise ValueError(f"{name} is not a scalar")
        return v.offset

    def unpack(self, X: np.ndarray) -> dict:
        """Map (K, nvar) vectors to a dict of (K, r, c) arrays (scalars -> (K,1,1))."""
        X = np.atleast_2d(X)
        K = X.shape[0]
        out = {}
        for v in self.vars.values():
            seg = X[:, v.offset:v.offset + v.size]
            if v.kind == "sym":
                n = v.shape[0]
                r, c = _tri(n)
                M = np.zeros((K, n, n))
                M[:, r, c] = seg
                M[:, c, r] = seg
                out[v.name] = M
            else:
                out[v.name] = seg.reshape((K,) + v.shape)
        return out

    def values(self, x: np.ndarray) -> dict:
        return {k: v[0] for k, v in self.unpack(x[None, :]).items()}

    # constraints ------------------------------------------------------------
    def _probe(self) -> dict:
        if self._probe_cache is None:
            X = np.vstack([np.zeros((1, self.nvar)), np.eye(self.nvar)])
            self._probe_cache = self.unpack(X)
        return self._probe_cache

    def add_lmi(self, func: Callable[[dict], np.ndarray], sense: str, tag: str = "") -> Lmi:
        if sense not in ("<", ">"):
            raise ValueError("sense must be '<' or '>'")
        out = np.asarray(func(self._probe()))
        if out.ndim != 3 or out.shape[1] != out.shape[2]:
            raise ValueError(f"LMI block {tag!r} must be square")
        F0 = out[0]
        Fk = out[1:] - F0
        if not np.allclose(F0, F0.T, atol=1e-9 * (1 + np.abs(F0).max())) or \
                not np.allclose(Fk, np.swapaxes(Fk, 1, 2), atol=1e-9 * (1 + np.abs(Fk).max())):
            raise ValueError(f"LMI block {tag!r} is not symmetric")
        s = out.shape[1]
        cols = svec(0.5 * (Fk + np.swapaxes(Fk, 1, 2))).T  # (svec_len, nvar)
        cols[np.abs(cols) < 1e-15] = 0.0
        lmi = Lmi(func, sense, tag, s, 0.5 * (F0 + F0.T), sp.csc_matrix(cols))
        self.lmis.append(lmi)
        return lmi

    def add_linear(self, coefs: dict[str, float], rhs: float, sense: str = "<=", tag: str = "") -> None:
        """sum coef*scalar  (<=|>=) rhs."""
        a = np.zeros(self.nvar)
        for k, v in coefs.items():
            a[self.index(k)] += v
        if sense == ">=":
            a, rhs = -a, -rhs
        self.lin.append((a, float(rhs), tag))

    def add_equal(self, coefs: dict[str, float], rhs: float) -> None:
        a = np.zeros(self.nvar)
        for k, v in coefs.items():
            a[self.index(k)] += v
        self.eq.append((a, float(rhs)))

    def minimize(self, coefs: dict[str, float]) -> None:
        c = np.zeros(self.nvar)
        for k, v in coefs.items():
            c[self.index(k)] += v
        self.c = c

    # solve --------------------------------------------------------------------
    def solve(self, tol: float | None = None, max_iter: int = 300, verbose: bool = False) -> SdpResult:
        if tol is None:
            tol = SOLVER_TOL
        rows_A, b_parts, cones = [], [], []
        if self.eq:
            rows_A.append(sp.csc_matrix(np.array([a for a, _ in self.eq])))
            b_parts.append(np.array([r for _, r in self.eq]))
            cones.append(clarabel.ZeroConeT(len(self.eq)))
        if self.lin:
            rows_A.append(sp.csc_matrix(np.array([a for a, _, _ in self.lin])))
            b_parts.append(np.array([r for _, r, _ in self.lin]))
            cones.append(clarabel.NonnegativeConeT(len(self.lin)))
        for L in self.lmis:
            I = np.eye(L.size)
            if L.sense == "<":
                b = svec(-L.F0 - self.margin * I)
                A = L.cols
            else:
                b = svec(L.F0 - self.margin * I)
                A = -L.cols
            rows_A.append(A)
            b_parts.append(b)
            cones.append(clarabel.PSDTriangleConeT(L.size))
        A = sp.vstack(rows_A).tocsc() if rows_A else sp.csc_matrix((0, self.nvar))
        b = np.concatenate(b_parts) if b_parts else np.zeros(0)
        q = self.c if self.c is not None else np.zeros(self.nvar)
        P = sp.csc_matrix((self.nvar, self.nvar))
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = max_iter
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = tol
        settings.tol_infeas_abs = 1e-10
        settings.tol_infeas_rel = 1e-10
        try:
            settings.max_threads = solver_threads()
        except AttributeError:  # older clarabel builds
            pass
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        sol = solver.solve()
        status = str(sol.status)
        x = np.asarray(sol.x, dtype=float)
        if status in ("Solved", "AlmostSolved"):
            norm_status = "solved"
        elif "Infeasible" in status:
            norm_status = "infeasible"
        else:
            norm_status = "failed:" + status
        if norm_status == "solved" or np.all(np.isfinite(x)):
            res = self.residuals(x)
            mres = max(res.values()) if res else -np.inf
        else:
            res, mres = {}, np.inf
        if norm_status.startswith("failed") and mres <= 0.0:
            # step limits hit after reaching a strictly feasible point
            norm_status = "solved"
        vals = self.values(x) if np.all(np.isfinite(x)) else {}
        return SdpResult(norm_status, x, vals, float(q @ x) if np.all(np.isfinite(x)) else np.inf,
                         mres, res, int(sol.iterations), float(sol.solve_time))

    def residuals(self, x: np.ndarray) -> dict:
        """Max violating eigenvalue per LMI (margin not included) and per linear row."""
        out = {}
        for k, L in enumerate(self.lmis):
            F = L.F0 + _unsvec(L.cols @ x, L.size)
            out[f"{k}:{L.tag}"] = block_residual(F, L.sense)
        for a, r, tag in self.lin:
            out[f"lin:{tag}"] = max(out.get(f"lin:{tag}", -np.inf), float(a @ x - r))
        return out


def _unsvec(v: np.ndarray, n: int) -> np.ndarray:
    r, c = _tri(n)
    scale = np.where(r == c, 1.0, 1.0 / SQRT2)
    M = np.zeros((n, n))
    M[r, c] = v * scale
    M[c, r] = v * scale
    return M


def evaluate_block(func: Callable[[dict], np.ndarray], values: dict) -> np.ndarray:
    """Evaluate a block function at a concrete solution (values without batch axis)."""
    batched = {k: np.asarray(v)[None, ...] if np.ndim(v) >= 2 else np.asarray(v).reshape(1, 1, 1)
               for k, v in values.items()}
    return np.asarray(func(batched))[0]

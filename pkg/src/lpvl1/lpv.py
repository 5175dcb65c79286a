"""Parameter-dependent matrices, scheduling domains and worst-case model constants."""
from __future__ import annotations

import itertools
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog


# ---------------------------------------------------------------------------
# basis functions


@dataclass(frozen=True)
class Basis:
    """Scalar function of theta used as a ParamMatrix term."""

    name: str
    kind: str
    index: int = -1
    powers: tuple[int, ...] = ()
    func: Callable | None = field(default=None, compare=False, repr=False)
    grad: Callable | None = field(default=None, compare=False, repr=False)

    @property
    def is_affine(self) -> bool:
        return self.kind == "affine"

    def min_dim(self) -> int:
        if self.kind == "affine":
            return self.index + 1
        if self.kind == "monomial":
            return len(self.powers)
        return 0

    def value(self, theta: np.ndarray) -> float:
        if self.kind == "affine":
            return float(theta[self.index])
        if self.kind == "monomial":
            return float(np.prod([theta[i] ** p for i, p in enumerate(self.powers)]))
        return float(self.func(theta))

    def value_batch(self, thetas: np.ndarray) -> np.ndarray:
        if self.kind == "affine":
            return thetas[:, self.index]
        if self.kind == "monomial":
            out = np.ones(thetas.shape[0])
            for i, p in enumerate(self.powers):
                if p:
                    out = out * thetas[:, i] ** p
            return out
        return np.array([self.func(t) for t in thetas], dtype=float)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        k = theta.shape[0]
        if self.kind == "affine":
            g = np.zeros(k)
            g[self.index] = 1.0
            return g
        if self.kind == "monomial":
            g = np.zeros(k)
            for i, p in enumerate(self.powers):
                if p == 0:
                    continue
                pw = list(self.powers)
                pw[i] -= 1
                g[i] = p * np.prod([theta[j] ** q for j, q in enumerate(pw)])
            return g
        if self.grad is None:
            raise ValueError(f"basis '{self.name}' has no registered gradient")
        return np.asarray(self.grad(theta), dtype=float)

    def to_dict(self) -> dict:
        if self.kind == "affine":
            return {"name": self.name, "kind": "affine", "index": self.index}
        if self.kind == "monomial":
            return {"name": self.name, "kind": "monomial", "powers": list(self.powers)}
        return {"name": self.name, "kind": "registered"}


_REGISTRY: dict[str, Basis] = {}


def affine(i: int) -> Basis:
    return Basis(name=f"theta{i}", kind="affine", index=int(i))


def monomial(powers: Sequence[int]) -> Basis:
    powers = tuple(int(p) for p in powers)
    if sum(powers) == 1:
        return affine(powers.index(1))
    name = "*".join(f"theta{i}^{p}" for i, p in enumerate(powers) if p)
    return Basis(name=name, kind="monomial", powers=powers)


def register_basis(name: str, func: Callable, grad: Callable | None = None) -> Basis:
    """Register a user scalar function of theta so models can reference it by name."""
    b = Basis(name=name, kind="registered", func=func, grad=grad)
    _REGISTRY[name] = b
    return b


def basis_from_spec(spec) -> Basis:
    if isinstance(spec, Basis):
        return spec
    if isinstance(spec, str):
        m = re.fullmatch(r"theta(\d+)", spec)
        if m:
            return affine(int(m.group(1)))
        if spec in _REGISTRY:
            return _REGISTRY[spec]
        raise KeyError(f"unregistered basis id '{spec}'")
    kind = spec.get("kind")
    if kind == "affine":
        return affine(spec["index"])
    if kind == "monomial":
        return monomial(spec["powers"])
    if kind == "registered":
        if spec["name"] not in _REGISTRY:
            raise KeyError(f"unregistered basis id '{spec['name']}'")
        return _REGISTRY[spec["name"]]
    raise KeyError(f"unknown basis kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter-dependent matrices


def _as_theta(theta, ntheta: int) -> np.ndarray:
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if th.ndim != 1 or th.shape[0] != ntheta:
        raise ValueError(f"theta has dimension {th.shape}, expected ({ntheta},)")
    return th


class ParamMatrix:
    """Matrix-valued function M(theta) = constant + sum_i b_i(theta) * coef_i."""

    def __init__(self, constant, terms=(), ntheta: int | None = None):
        const = np.atleast_2d(np.asarray(constant, dtype=float))
        parsed = []
        for b, coef in terms:
            c = np.atleast_2d(np.asarray(coef, dtype=float))
            if c.shape != const.shape:
                raise ValueError(f"coefficient shape {c.shape} differs from {const.shape}")
            parsed.append((basis_from_spec(b), c))
        need = max([b.min_dim() for b, _ in parsed] + [0])
        if ntheta is None:
            ntheta = need
        if ntheta < need:
            raise ValueError(f"ntheta={ntheta} too small for basis catalog (needs {need})")
        self.constant = const
        self.terms = tuple(parsed)
        self.ntheta = int(ntheta)
        self.constant.setflags(write=False)
        for _, c in self.terms:
            c.setflags(write=False)

    # shape ----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.constant.shape

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def affine(self) -> bool:
        return all(b.is_affine for b, _ in self.terms)

    @property
    def is_constant(self) -> bool:
        return all(not np.any(c) for _, c in self.terms)

    # evaluation -----------------------------------------------------------
    def __call__(self, theta) -> np.ndarray:
        return self.eval(theta)

    def eval(self, theta) -> np.ndarray:
        th = _as_theta(theta, self.ntheta)
        out = self.constant.copy()
        for b, c in self.terms:
            out += b.value(th) * c
        return out

    def eval_batch(self, thetas) -> np.ndarray:
        th = np.asarray(thetas, dtype=float).reshape(-1, self.ntheta)
        out = np.broadcast_to(self.constant, (th.shape[0],) + self.shape).copy()
        for b, c in self.terms:
            out += b.value_batch(th)[:, None, None] * c
        return out

    def eval_rate(self, theta, theta_dot) -> np.ndarray:
        th = _as_theta(theta, self.ntheta)
        thd = _as_theta(theta_dot, self.ntheta)
        out = np.zeros(self.shape)
        for b, c in self.terms:
            out += float(b.gradient(th) @ thd) * c
        return out

    rate = eval_rate

    def affine_coefficients(self) -> list[np.ndarray]:
        """[M0, M1, ..., Mk] with M(theta) = M0 + sum theta_i M_i (affine only)."""
        if not self.affine:
            raise ValueError("matrix has non-affine terms")
        coefs = [self.constant.copy()] + [np.zeros(self.shape) for _ in range(self.ntheta)]
        for b, c in self.terms:
            coefs[b.index + 1] += c
        return coefs

    @classmethod
    def from_affine(cls, coefs: Sequence) -> "ParamMatrix":
        coefs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in coefs]
        terms = [(affine(i), c) for i, c in enumerate(coefs[1:])]
        return cls(coefs[0], terms, ntheta=len(coefs) - 1)

    # algebra ----------------------------------------------------------------
    def __add__(self, other: "ParamMatrix") -> "ParamMatrix":
        if not isinstance(other, ParamMatrix):
            return ParamMatrix(self.constant + np.asarray(other), self.terms, self.ntheta)
        if other.shape != self.shape:
            raise ValueError("shape mismatch")
        return ParamMatrix(self.constant + other.constant, self.terms + other.terms,
                           max(self.ntheta, other.ntheta))

    def __mul__(self, s: float) -> "ParamMatrix":
        return ParamMatrix(self.constant * s, [(b, c * s) for b, c in self.terms], self.ntheta)

    __rmul__ = __mul__

    @property
    def T(self) -> "ParamMatrix":
        return ParamMatrix(self.constant.T, [(b, c.T) for b, c in self.terms], self.ntheta)

    def __repr__(self) -> str:
        return f"ParamMatrix(shape={self.shape}, ntheta={self.ntheta}, terms={[b.name for b, _ in self.terms]})"

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "constant": self.constant.tolist(),
            "terms": [{"basis": b.name, "coef": c.tolist()} for b, c in self.terms],
        }

    @classmethod
    def from_dict(cls, d: dict, basis: dict[str, Basis] | None = None,
                  ntheta: int | None = None) -> "ParamMatrix":
        basis = basis or {}
        terms = []
        for t in d.get("terms", []):
            key = t["basis"]
            terms.append((basis[key] if key in basis else basis_from_spec(key), t["coef"]))
        return cls(d["constant"], terms, ntheta=ntheta)


class FunctionMatrix:
    """Evaluator for a derived matrix function of theta (e.g. K_r(theta), B_u(theta)).

    Exposes the same evaluation surface as ParamMatrix; rates come from central
    differences unless a batch/rate function is supplied.
    """

    affine = False

    def __init__(self, func: Callable, shape: tuple[int, int], ntheta: int,
                 batch: Callable | None = None, name: str = ""):
        self.func = func
        self._shape = tuple(shape)
        self.ntheta = int(ntheta)
        self._batch = batch
        self.name = name

    @property
    def shape(self):
        return self._shape

    @property
    def rows(self):
        return self._shape[0]

    @property
    def cols(self):
        return self._shape[1]

    def __call__(self, theta):
        return self.eval(theta)

    def eval(self, theta):
        return np.asarray(self.func(_as_theta(theta, self.ntheta)), dtype=float).reshape(self._shape)

    def eval_batch(self, thetas):
        th = np.asarray(thetas, dtype=float).reshape(-1, self.ntheta)
        if self._batch is not None:
            return np.asarray(self._batch(th), dtype=float).reshape((th.shape[0],) + self._shape)
        if th.shape[0] == 0:
            return np.zeros((0,) + self._shape)
        return np.stack([self.eval(t) for t in th])

    def eval_rate(self, theta, theta_dot, h: float = 1e-6):
        th = _as_theta(theta, self.ntheta)
        thd = _as_theta(theta_dot, self.ntheta)
        return (self.eval(th + h * thd) - self.eval(th - h * thd)) / (2 * h)

    rate = eval_rate

    def __repr__(self):
        return f"FunctionMatrix({self.name or 'anonymous'}, shape={self._shape})"


def constant_matrix(M, ntheta: int) -> ParamMatrix:
    return ParamMatrix(M, (), ntheta=ntheta)


def as_param(M, ntheta: int):
    """Wrap arrays as constant ParamMatrix; pass evaluators through."""
    if isinstance(M, (ParamMatrix, FunctionMatrix)):
        return M
    return constant_matrix(M, ntheta)


# ---------------------------------------------------------------------------
# domains


def _tuple(v) -> tuple[float, ...]:
    return tuple(float(x) for x in np.atleast_1d(np.asarray(v, dtype=float)))


@dataclass(frozen=True)
class ParamDomain:
    """Parameter box Theta, rate box Theta_d and grid resolution."""

    theta_lo: tuple[float, ...]
    theta_hi: tuple[float, ...]
    rate_lo: tuple[float, ...]
    rate_hi: tuple[float, ...]
    grid_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "theta_lo", _tuple(self.theta_lo) if len(np.atleast_1d(self.theta_lo)) else ())
        object.__setattr__(self, "theta_hi", _tuple(self.theta_hi) if len(np.atleast_1d(self.theta_hi)) else ())
        object.__setattr__(self, "rate_lo", _tuple(self.rate_lo) if len(np.atleast_1d(self.rate_lo)) else ())
        object.__setattr__(self, "rate_hi", _tuple(self.rate_hi) if len(np.atleast_1d(self.rate_hi)) else ())
        object.__setattr__(self, "grid_counts", tuple(int(c) for c in np.atleast_1d(self.grid_counts)))
        k = len(self.theta_lo)
        for name in ("theta_hi", "rate_lo", "rate_hi", "grid_counts"):
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} has {len(getattr(self, name))} axes, expected {k}")
        for lo, hi in zip(self.theta_lo + self.rate_lo, self.theta_hi + self.rate_hi):
            if not lo <= hi:
                raise ValueError(f"lower bound {lo} exceeds upper bound {hi}")
        if any(c < 2 for c in self.grid_counts):
            raise ValueError("grid_counts must be >= 2 on every axis")

    @classmethod
    def lti(cls) -> "ParamDomain":
        """Domain with no scheduling parameters (one-point grid)."""
        return cls((), (), (), (), ())

    @property
    def ntheta(self) -> int:
        return len(self.theta_lo)

    @property
    def b_theta_dot(self) -> float:
        mags = [max(abs(lo), abs(hi)) for lo, hi in zip(self.rate_lo, self.rate_hi)]
        return float(np.linalg.norm(mags)) if mags else 0.0

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.theta_lo, self.theta_hi, self.grid_counts)]

    def grid_points(self) -> np.ndarray:
        """Cartesian grid, row-major (last axis varies fastest), endpoints included."""
        if self.ntheta == 0:
            return np.zeros((1, 0))
        return np.array(list(itertools.product(*self.axes())), dtype=float)

    def theta_vertices(self) -> np.ndarray:
        if self.ntheta == 0:
            return np.zeros((1, 0))
        return np.array(list(itertools.product(*zip(self.theta_lo, self.theta_hi))), dtype=float)

    def rate_vertices(self) -> np.ndarray:
        if self.ntheta == 0:
            return np.zeros((1, 0))
        pts = list(itertools.product(*[sorted({lo, hi}) for lo, hi in zip(self.rate_lo, self.rate_hi)]))
        return np.array(pts, dtype=float)

    def vertices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """All corners of Theta x Theta_d."""
        if self.ntheta == 0:
            return [(np.zeros(0), np.zeros(0))]
        return [(th.copy(), rd.copy()) for th in self.theta_vertices() for rd in self.rate_vertices()]

    def refined(self, factor: int = 2) -> "ParamDomain":
        """Nested refinement: each interval split into ``factor`` pieces."""
        counts = tuple(factor * (c - 1) + 1 for c in self.grid_counts)
        return ParamDomain(self.theta_lo, self.theta_hi, self.rate_lo, self.rate_hi, counts)

    def with_counts(self, counts) -> "ParamDomain":
        return ParamDomain(self.theta_lo, self.theta_hi, self.rate_lo, self.rate_hi, tuple(counts))

    def contains(self, theta, tol: float = 1e-12) -> bool:
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        return bool(np.all(th >= np.array(self.theta_lo) - tol) and np.all(th <= np.array(self.theta_hi) + tol))

    def contains_rate(self, theta_dot, tol: float = 1e-12) -> bool:
        th = np.atleast_1d(np.asarray(theta_dot, dtype=float))
        return bool(np.all(th >= np.array(self.rate_lo) - tol) and np.all(th <= np.array(self.rate_hi) + tol))

    def adjacent_pairs(self) -> list[tuple[int, int]]:
        """Index pairs of grid points that differ by one step along one axis."""
        if self.ntheta == 0:
            return []
        idx = np.arange(int(np.prod(self.grid_counts))).reshape(self.grid_counts)
        pairs = []
        for ax in range(self.ntheta):
            a = np.moveaxis(idx, ax, 0)
            pairs.extend(zip(a[:-1].ravel().tolist(), a[1:].ravel().tolist()))
        return pairs

    def to_dict(self) -> dict:
        return {
            "theta_box": [list(p) for p in zip(self.theta_lo, self.theta_hi)],
            "rate_box": [list(p) for p in zip(self.rate_lo, self.rate_hi)],
            "grid_counts": list(self.grid_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamDomain":
        tb = d.get("theta_box", [])
        rb = d.get("rate_box", [])
        counts = d.get("grid_counts") or [2] * len(tb)
        return cls([b[0] for b in tb], [b[1] for b in tb], [b[0] for b in rb], [b[1] for b in rb], counts)


# ---------------------------------------------------------------------------
# input-gain uncertainty


class OmegaPolytope:
    """Convex hull of m x m input-gain vertices (strictly row-diagonally dominant)."""

    def __init__(self, vertices, signs=None):
        verts = [np.atleast_2d(np.asarray(v, dtype=float)) for v in vertices]
        if not verts:
            raise ValueError("omega polytope needs at least one vertex")
        m = verts[0].shape[0]
        for v in verts:
            if v.shape != (m, m):
                raise ValueError("omega vertices must be square and share dimension")
        signs = np.ones(m) if signs is None else np.asarray(signs, dtype=float)
        for v in verts:
            d = np.diag(v)
            off = np.sum(np.abs(v), axis=1) - np.abs(d)
            if np.any(np.sign(d) != signs) or np.any(np.abs(d) <= off):
                raise ValueError("omega vertex is not strictly row-diagonally dominant with declared signs")
        self.m = m
        self.vertices = tuple(verts)
        self.signs = signs
        self.diagonally_dominant_checked = True
        self.contains_identity = self._hull_contains(np.eye(m))

    @classmethod
    def identity(cls, m: int) -> "OmegaPolytope":
        return cls([np.eye(m)])

    @classmethod
    def interval(cls, lo: float, hi: float) -> "OmegaPolytope":
        return cls([[[lo]], [[hi]]])

    def _hull_contains(self, M: np.ndarray) -> bool:
        V = np.stack([v.ravel() for v in self.vertices], axis=1)
        k = V.shape[1]
        A_eq = np.vstack([V, np.ones((1, k))])
        b_eq = np.concatenate([M.ravel(), [1.0]])
        res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
        return bool(res.status == 0)

    def samples(self, count: int = 200, seed: int = 0) -> list[np.ndarray]:
        """Vertices plus deterministic random convex combinations."""
        if len(self.vertices) == 1:
            return list(self.vertices)
        rng = np.random.default_rng(seed)
        w = rng.dirichlet(np.ones(len(self.vertices)), size=count)
        out = list(self.vertices)
        out += [sum(wi * v for wi, v in zip(row, self.vertices)) for row in w]
        return out

    def max_norm(self, fn: Callable[[np.ndarray], np.ndarray] = lambda w: w) -> float:
        """max over the polytope of ||fn(omega)||_2.

        Exact at the vertices for convex fn (identity, shifts); for the inverse
        and m > 1 the hull is sampled as well.
        """
        if self.m == 1 and len(self.vertices) == 2:
            lo, hi = sorted(float(v[0, 0]) for v in self.vertices)
            pts = [np.array([[lo]]), np.array([[hi]])]
            if lo < 0 < hi:
                pts.append(np.array([[0.0]]))
            vals = [np.atleast_2d(fn(p)) for p in pts]
            return max(float(np.linalg.norm(v, 2)) for v in vals if np.all(np.isfinite(v)))
        return max(float(np.linalg.norm(np.atleast_2d(fn(v)), 2)) for v in self.samples())

    def to_list(self) -> list:
        return [v.tolist() for v in self.vertices]


# ---------------------------------------------------------------------------
# plant model


@dataclass(frozen=True)
class LpvModel:
    """Plant data (A(theta), B(theta), C(theta)) with its scheduling domain."""

    A: ParamMatrix
    B: ParamMatrix
    C: ParamMatrix
    domain: ParamDomain
    omega: OmegaPolytope
    rho0: float = 0.0
    name: str = "model"

    def __post_init__(self):
        n = self.A.rows
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.rows != n or self.C.cols != n:
            raise ValueError("B/C dimensions inconsistent with A")
        if self.omega.m != self.B.cols:
            raise ValueError("omega dimension must equal number of inputs")
        for M in (self.A, self.B, self.C):
            if M.ntheta != self.domain.ntheta:
                raise ValueError("matrix theta dimension differs from domain")

    @property
    def n(self) -> int:
        return self.A.rows

    @property
    def m(self) -> int:
        return self.B.cols

    @property
    def p(self) -> int:
        return self.C.rows

    @property
    def ntheta(self) -> int:
        return self.domain.ntheta

    def check_theta(self, theta) -> None:
        if not self.domain.contains(theta, tol=1e-9):
            warnings.warn(f"theta={np.asarray(theta)} lies outside the scheduling box", stacklevel=2)

    def with_domain(self, domain: ParamDomain) -> "LpvModel":
        return LpvModel(self.A, self.B, self.C, domain, self.omega, self.rho0, self.name)


def _collect_basis(mats: Sequence[ParamMatrix]) -> list[dict]:
    seen: dict[str, dict] = {}
    for M in mats:
        for b, _ in M.terms:
            seen.setdefault(b.name, b.to_dict())
    return list(seen.values())


def model_to_dict(model: LpvModel) -> dict:
    d = {
        "name": model.name,
        "n": model.n,
        "m": model.m,
        "p": model.p,
        "basis": _collect_basis([model.A, model.B, model.C]),
        "A": model.A.to_dict(),
        "B": model.B.to_dict(),
        "C": model.C.to_dict(),
        "omega_vertices": model.omega.to_list(),
        "rho0": model.rho0,
    }
    d.update(model.domain.to_dict())
    return d


def model_from_dict(d: dict) -> LpvModel:
    basis = {}
    for spec in d.get("basis", []):
        b = basis_from_spec(spec)
        basis[spec.get("name", b.name)] = b
    domain = ParamDomain.from_dict(d)
    k = domain.ntheta
    A = ParamMatrix.from_dict(d["A"], basis, ntheta=k)
    B = ParamMatrix.from_dict(d["B"], basis, ntheta=k)
    C = ParamMatrix.from_dict(d["C"], basis, ntheta=k)
    for key, M, shape in (("A", A, (d["n"], d["n"])), ("B", B, (d["n"], d["m"])), ("C", C, (d["p"], d["n"]))):
        if M.shape != tuple(shape):
            raise ValueError(f"{key} has shape {M.shape}, declared {tuple(shape)}")
    omega = OmegaPolytope(d.get("omega_vertices") or [np.eye(d["m"]).tolist()])
    return LpvModel(A, B, C, domain, omega, float(d.get("rho0", 0.0)), d.get("name", "model"))


def save_model(model: LpvModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path) -> LpvModel:
    return model_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# pseudo-inverses and the null complement


def left_pinv(B: np.ndarray) -> np.ndarray:
    """(B^T B)^{-1} B^T for full column rank B (works on stacked batches)."""
    Bt = np.swapaxes(B, -1, -2)
    return np.linalg.solve(Bt @ B, Bt)


class NullComplement(FunctionMatrix):
    """Orthonormal basis B_u(theta) of the orthogonal complement of range B(theta).

    The basis is rotation-aligned to a reference frame taken at the first grid
    point: B_u is the orthogonal polar factor of (I - B B^+) R, which makes it a
    continuous function of theta wherever that projection keeps full rank.
    """

    def __init__(self, B, ref: np.ndarray):
        n, m = B.shape
        self.B = B
        self.ref = ref
        super().__init__(self._eval_one, (n, n - m), B.ntheta, batch=self._eval_many, name="B_u")

    @staticmethod
    def _null_basis(Bb: np.ndarray) -> np.ndarray:
        m = Bb.shape[-1]
        _, _, vh = np.linalg.svd(np.swapaxes(Bb, -1, -2), full_matrices=True)
        return np.swapaxes(vh[..., m:, :], -1, -2)

    def _align(self, N: np.ndarray) -> np.ndarray:
        M = np.swapaxes(N, -1, -2) @ self.ref
        u, _, vh = np.linalg.svd(M)
        return N @ (u @ vh)

    def _eval_one(self, theta):
        Bt = self.B.eval(theta)
        return self._align(self._null_basis(Bt))

    def _eval_many(self, thetas):
        Bb = self.B.eval_batch(thetas)
        return self._align(self._null_basis(Bb))

    def alignment_margin(self, thetas) -> float:
        Bb = self.B.eval_batch(thetas)
        M = np.swapaxes(self._null_basis(Bb), -1, -2) @ self.ref
        return float(np.min(np.linalg.svd(M, compute_uv=False)))


def null_complement(B, d: ParamDomain, rank_tol: float = 1e-9) -> NullComplement:
    """B_u(theta) with B^T B_u = 0, [B B_u] nonsingular and orthonormal columns."""
    grid = d.grid_points()
    Bb = B.eval_batch(grid)
    n, m = B.shape
    if m >= n:
        raise ValueError("B must have fewer columns than rows to admit a complement")
    sv = np.linalg.svd(Bb, compute_uv=False)
    bad = np.where(sv[:, -1] <= rank_tol * np.maximum(sv[:, 0], 1.0))[0]
    if bad.size:
        raise ValueError(f"B(theta) rank deficient at grid point {grid[bad[0]].tolist()}")
    ref = NullComplement._null_basis(Bb[0])
    nc = NullComplement(B, ref)
    margin = nc.alignment_margin(grid)
    if margin < 1e-3:
        raise ValueError(f"null-space alignment degenerates on the grid (margin {margin:.2e})")
    return nc


# ---------------------------------------------------------------------------
# worst-case constants


@dataclass(frozen=True)
class ModelConstants:
    b_Am: float
    b_B: float
    b_Bdag: float
    b_C: float
    b_Bu: float
    b_Budag: float
    b_Kx: float
    b_Kr: float
    L_B: float
    L_Bdag: float
    L_Kx: float
    L_Bu: float = 0.0
    L_Budag: float = 0.0
    b_theta_dot: float = 0.0
    b_BKx: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _norms(batch: np.ndarray) -> np.ndarray:
    if batch.size == 0:
        return np.zeros(batch.shape[0])
    return np.linalg.norm(batch, ord=2, axis=(-2, -1))


def _lipschitz(batch: np.ndarray, grid: np.ndarray, pairs, safety: float) -> float:
    best = 0.0
    for i, j in pairs:
        dth = np.linalg.norm(grid[i] - grid[j])
        if dth > 0:
            best = max(best, float(np.linalg.norm(batch[i] - batch[j], 2) / dth))
    return safety * best


def model_constants(model: LpvModel, d: ParamDomain | None = None, Kx=None, Kr=None,
                    Bu=None, safety: float = 1.1) -> ModelConstants:
    """Grid maxima of the norms and sampled Lipschitz constants of the plant data."""
    d = d or model.domain
    grid = d.grid_points()
    pairs = d.adjacent_pairs()
    Bb = model.B.eval_batch(grid)
    Ab = model.A.eval_batch(grid)
    Cb = model.C.eval_batch(grid)
    cond = np.linalg.cond(np.swapaxes(Bb, -1, -2) @ Bb)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
        raise ValueError("singular pseudo-inverse of B on the grid")
    Bdag = left_pinv(Bb)
    Kxb = Kx.eval_batch(grid) if Kx is not None else np.zeros((grid.shape[0], model.m, model.n))
    Krb = Kr.eval_batch(grid) if Kr is not None else np.zeros((grid.shape[0], model.m, model.p))
    Amb = Ab + Bb @ Kxb
    if model.m < model.n:
        Bu = Bu if Bu is not None else null_complement(model.B, d)
        Bub = Bu.eval_batch(grid)
        Budag = left_pinv(Bub)
    else:
        Bub = Budag = np.zeros((grid.shape[0], model.n, 0))
    return ModelConstants(
        b_Am=float(_norms(Amb).max()),
        b_B=float(_norms(Bb).max()),
        b_Bdag=float(_norms(Bdag).max()),
        b_C=float(_norms(Cb).max()),
        b_Bu=float(_norms(Bub).max()),
        b_Budag=float(_norms(Budag).max()),
        b_Kx=float(_norms(Kxb).max()),
        b_Kr=float(_norms(Krb).max()),
        L_B=_lipschitz(Bb, grid, pairs, safety),
        L_Bdag=_lipschitz(Bdag, grid, pairs, safety),
        L_Kx=_lipschitz(Kxb, grid, pairs, safety),
        L_Bu=_lipschitz(Bub, grid, pairs, safety),
        L_Budag=_lipschitz(Budag, grid, pairs, safety),
        b_theta_dot=d.b_theta_dot,
        b_BKx=float(_norms(Bb @ Kxb).max()),
    )


def _mul_basis(b1: Basis, b2: Basis, ntheta: int) -> Basis | None:
    if b1.kind == "registered" or b2.kind == "registered":
        return None
    p1 = list(b1.powers) if b1.kind == "monomial" else [1 if i == b1.index else 0 for i in range(ntheta)]
    p2 = list(b2.powers) if b2.kind == "monomial" else [1 if i == b2.index else 0 for i in range(ntheta)]
    p1 += [0] * (ntheta - len(p1))
    p2 += [0] * (ntheta - len(p2))
    return monomial([a + b for a, b in zip(p1, p2)])


def param_matmul(M1, M2):
    """Product of two parameter-dependent matrices.

    Polynomial bases stay polynomial (ParamMatrix); anything else falls back to a
    FunctionMatrix evaluator.
    """
    if isinstance(M1, ParamMatrix) and isinstance(M2, ParamMatrix):
        k = max(M1.ntheta, M2.ntheta)
        terms = []
        ok = True
        for b, c in M1.terms:
            terms.append((b, c @ M2.constant))
        for b, c in M2.terms:
            terms.append((b, M1.constant @ c))
        for b1, c1 in M1.terms:
            for b2, c2 in M2.terms:
                b = _mul_basis(b1, b2, k)
                if b is None:
                    ok = False
                    break
                terms.append((b, c1 @ c2))
        if ok:
            merged: dict[str, list] = {}
            for b, c in terms:
                if b.name in merged:
                    merged[b.name][1] = merged[b.name][1] + c
                else:
                    merged[b.name] = [b, c]
            return ParamMatrix(M1.constant @ M2.constant, [tuple(v) for v in merged.values()], ntheta=k)
    k = max(M1.ntheta, M2.ntheta)
    return FunctionMatrix(lambda th: M1.eval(th) @ M2.eval(th), (M1.shape[0], M2.shape[1]), k,
                          batch=lambda ths: M1.eval_batch(ths) @ M2.eval_batch(ths), name="product")


def param_add(M1, M2):
    if isinstance(M1, ParamMatrix) and isinstance(M2, ParamMatrix):
        return M1 + M2
    k = max(M1.ntheta, M2.ntheta)
    return FunctionMatrix(lambda th: M1.eval(th) + M2.eval(th), M1.shape, k,
                          batch=lambda ths: M1.eval_batch(ths) + M2.eval_batch(ths), name="sum")

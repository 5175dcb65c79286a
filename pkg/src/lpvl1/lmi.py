"""Grid-expanded parameter-dependent LMIs: stability, peak-to-peak gain, baseline gains."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .lpv import FunctionMatrix, OmegaPolytope, ParamDomain, ParamMatrix, as_param
from .sdp import SdpProblem, SdpResult, block_residual

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VERIFY_TOL = 1e-7


class InfeasibleError(RuntimeError):
    """No point of the search produced a feasible (and verified) certificate."""

    def __init__(self, msg: str, scan: list | None = None):
        super().__init__(msg)
        self.scan = scan or []


# ---------------------------------------------------------------------------
# block helpers


def _bc(M, K: int) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return np.broadcast_to(M, (K,) + M.shape)
    return M


def sym_block(lower: Sequence[Sequence]) -> np.ndarray:
    """Assemble a symmetric batched block matrix from its lower triangle.

    ``lower[i]`` holds blocks (i, 0..i); entries may be 2-D data or (K, r, c)
    batches of decision values.
    """
    K = 1
    for row in lower:
        for b in row:
            if np.ndim(b) == 3:
                K = max(K, np.shape(b)[0])
    n = len(lower)
    full: list[list[Any]] = [[None] * n for _ in range(n)]
    for i, row in enumerate(lower):
        if len(row) != i + 1:
            raise ValueError("lower-triangular block rows must have increasing length")
        for j, b in enumerate(row):
            b = _bc(b, K)
            full[i][j] = b
            if j < i:
                full[j][i] = np.swapaxes(b, 1, 2)
    return np.concatenate([np.concatenate(r, axis=2) for r in full], axis=1)


def _T(M):
    return np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# state-space container


class LpvStateSpace:
    """(A, B, C, D) as functions of theta, optionally affine in the input-gain omega."""

    def __init__(self, func: Callable, n: int, nin: int, nout: int, ntheta: int,
                 name: str = "sys", omega_affine: bool = False):
        self.func = func
        self.n, self.nin, self.nout = int(n), int(nin), int(nout)
        self.ntheta = int(ntheta)
        self.name = name
        self.omega_affine = bool(omega_affine)

    @classmethod
    def from_matrices(cls, A, B, C, D=None, name: str = "sys", ntheta: int | None = None):
        mats = [A, B, C, D]
        k = ntheta if ntheta is not None else max(
            [getattr(M, "ntheta", 0) for M in mats if M is not None] + [0])
        A, B, C = (as_param(M, k) for M in (A, B, C))
        D = as_param(np.zeros((C.shape[0], B.shape[1])) if D is None else D, k)
        n, nin, nout = A.shape[0], B.shape[1], C.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n or D.shape != (nout, nin):
            raise ValueError("state-space dimension mismatch")
        return cls(lambda th, w=None: (A.eval(th), B.eval(th), C.eval(th), D.eval(th)),
                   n, nin, nout, k, name)

    def eval(self, theta, omega=None):
        if self.omega_affine and omega is None:
            raise ValueError(f"{self.name}: omega value required")
        A, B, C, D = self.func(np.asarray(theta, dtype=float), omega)
        A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C, D))
        if A.shape != (self.n, self.n) or B.shape != (self.n, self.nin) or \
                C.shape != (self.nout, self.n) or D.shape != (self.nout, self.nin):
            raise ValueError(f"{self.name}: realization returned inconsistent dimensions")
        return A, B, C, D

    def omega_points(self, omega: OmegaPolytope | None) -> list:
        if not self.omega_affine:
            return [None]
        if omega is None:
            raise ValueError(f"{self.name} depends on omega; an OmegaPolytope is required")
        return list(omega.vertices)

    def freq_response(self, theta, s: complex, omega=None) -> np.ndarray:
        A, B, C, D = self.eval(theta, omega)
        return C @ np.linalg.solve(s * np.eye(self.n) - A, B) + D

    def dc_gain(self, theta, omega=None) -> np.ndarray:
        A, B, C, D = self.eval(theta, omega)
        return -C @ np.linalg.solve(A, B) + D

    def decay_rate(self, thetas, omega: OmegaPolytope | None = None) -> float:
        """min over points of -max Re eig(A)."""
        worst = np.inf
        for th in thetas:
            for w in self.omega_points(omega):
                A = self.eval(th, w)[0]
                if A.size:
                    worst = min(worst, -float(np.max(np.linalg.eigvals(A).real)))
        return worst

    def __repr__(self):
        return f"LpvStateSpace({self.name}: n={self.n}, in={self.nin}, out={self.nout}, omega={self.omega_affine})"


# ---------------------------------------------------------------------------
# certificates


@dataclass
class Certificate:
    """Stored solution of an LMI problem together with its verification record."""

    kind: str
    coefficients: dict
    scalars: dict
    domain: ParamDomain
    extra_points: np.ndarray
    omega_vertices: list
    solve_residual: float
    verify_residual: float
    verify_counts: tuple
    eps: float
    mu_scan: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def matrix(self, name: str, theta) -> np.ndarray:
        coefs = self.coefficients[name]
        out = np.array(coefs[0], dtype=float)
        for t, c in zip(np.atleast_1d(theta), coefs[1:]):
            out = out + t * np.asarray(c)
        return out

    def matrix_rate(self, name: str, theta_dot) -> np.ndarray:
        coefs = self.coefficients[name]
        out = np.zeros_like(np.asarray(coefs[0], dtype=float))
        for t, c in zip(np.atleast_1d(theta_dot), coefs[1:]):
            out = out + t * np.asarray(c)
        return out

    def param(self, name: str) -> ParamMatrix:
        return ParamMatrix.from_affine(self.coefficients[name])

    def P(self, theta) -> np.ndarray:
        return self.matrix("P", theta)

    @property
    def gamma(self) -> float:
        return float(self.scalars.get("gamma", np.nan))

    @property
    def mu(self) -> float:
        return float(self.scalars.get("mu", np.nan))

    @property
    def verified(self) -> bool:
        return bool(self.verify_residual <= VERIFY_TOL)

    def points(self) -> np.ndarray:
        g = self.domain.grid_points()
        if len(self.extra_points):
            g = np.vstack([g, np.asarray(self.extra_points).reshape(-1, g.shape[1])])
        return g

    def check_points(self) -> np.ndarray:
        return self.domain.refined(2).grid_points()

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "coefficients": {k: [np.asarray(c).tolist() for c in v] for k, v in self.coefficients.items()},
            "scalars": {k: float(v) for k, v in self.scalars.items()},
            "grid": self.domain.to_dict(),
            "extra_points": np.asarray(self.extra_points).tolist(),
            "omega_vertices": [np.asarray(w).tolist() for w in self.omega_vertices],
            "solve_residual": float(self.solve_residual),
            "verify_residual": float(self.verify_residual),
            "verify_counts": list(self.verify_counts),
            "eps": float(self.eps),
            "mu_scan": self.mu_scan,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported certificate schema version {d.get('schema_version')}")
        return cls(
            kind=d["kind"],
            coefficients={k: [np.asarray(c, dtype=float) for c in v] for k, v in d["coefficients"].items()},
            scalars=dict(d["scalars"]),
            domain=ParamDomain.from_dict(d["grid"]),
            extra_points=np.asarray(d.get("extra_points", []), dtype=float),
            omega_vertices=[np.asarray(w, dtype=float) for w in d.get("omega_vertices", [])],
            solve_residual=d["solve_residual"],
            verify_residual=d["verify_residual"],
            verify_counts=tuple(d.get("verify_counts", ())),
            eps=d["eps"],
            mu_scan=d.get("mu_scan", []),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Certificate":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# generic grid solve with verification-driven refinement


@dataclass
class LmiFamily:
    """Decision variables plus the LMI instances generated at each grid point."""

    declare: Callable[[SdpProblem], Any]
    instances: Callable[[Any, np.ndarray], list]
    finalize: Callable[[SdpProblem, Any], None]


@dataclass
class FamilyResult:
    result: SdpResult
    handles: Any
    extra: list
    verify_residual: float
    margin: float

    @property
    def ok(self) -> bool:
        return self.result.ok


def family_residual(fam: LmiFamily, handles, values: dict, points) -> list[tuple[float, np.ndarray]]:
    """Worst block residual at each point for a concrete solution."""
    batched = {k: np.asarray(v)[None, ...] for k, v in values.items()}
    out = []
    for th in points:
        worst = -np.inf
        for _, sense, f in fam.instances(handles, np.asarray(th)):
            worst = max(worst, block_residual(np.asarray(f(batched))[0], sense))
        out.append((worst, np.asarray(th)))
    return out


def solve_family(fam: LmiFamily, points, verify_points=None, margin: float = 1e-6,
                 tol: float = VERIFY_TOL, max_rounds: int = 6, add_per_round: int = 8,
                 initial: FamilyResult | None = None) -> FamilyResult:
    """Solve on ``points``, then add the worst violators among ``verify_points`` until clean.

    ``initial`` is a result already solved on the same points (e.g. from a mu scan);
    it is checked first and only re-solved when the check fails.
    """
    base = [np.asarray(p, dtype=float) for p in points]
    extra: list[np.ndarray] = []
    vmax = np.nan
    res = None
    h = None
    for _ in range(max_rounds):
        if initial is not None:
            res, h, margin = initial.result, initial.handles, initial.margin
            extra = [np.asarray(e, dtype=float) for e in initial.extra]
            initial = None
        else:
            prob = SdpProblem(margin=margin)
            h = fam.declare(prob)
            for th in base + extra:
                for tag, sense, f in fam.instances(h, th):
                    prob.add_lmi(f, sense, tag)
            fam.finalize(prob, h)
            res = prob.solve()
        if not res.ok:
            return FamilyResult(res, h, extra, np.inf, margin)
        if res.max_residual > tol:
            margin *= 10.0
            continue
        if verify_points is None:
            return FamilyResult(res, h, extra, float(res.max_residual), margin)
        checks = family_residual(fam, h, res.values, verify_points)
        vmax = max(r for r, _ in checks)
        if vmax <= tol:
            return FamilyResult(res, h, extra, vmax, margin)
        bad = sorted((c for c in checks if c[0] > tol), key=lambda c: -c[0])
        added = 0
        for _, th in bad:
            if not any(np.allclose(th, e) for e in base + extra):
                extra.append(th)
                added += 1
            if added >= add_per_round:
                break
        if added == 0:
            margin *= 10.0
    return FamilyResult(res, h, extra, vmax, margin)


def _extra(extra, d: ParamDomain) -> np.ndarray:
    return np.asarray(extra, dtype=float).reshape(len(extra), d.ntheta)


# ---------------------------------------------------------------------------
# mu grids


def default_mu_grid(sys: LpvStateSpace, d: ParamDomain, omega=None, count: int = 20) -> np.ndarray:
    """Geometric grid on [0.05, 2*decay) where decay is the slowest frozen-theta decay rate."""
    decay = sys.decay_rate(d.grid_points(), omega)
    if not np.isfinite(decay):
        decay = 1.0
    if decay <= 0:
        raise InfeasibleError(f"{sys.name}: frozen-theta dynamics are not exponentially stable")
    hi = 2.0 * decay * 0.98
    lo = min(0.05, hi / 4)
    return np.geomspace(lo, hi, count)


# ---------------------------------------------------------------------------
# stability certificates


def _stability_family(sys: LpvStateSpace, d: ParamDomain, omegas, mu: float, normalize: bool = True) -> LmiFamily:
    n = sys.n
    rates = d.rate_vertices()
    I = np.eye(n)

    def declare(prob):
        return {"P": prob.affine_sym("P", n, d.ntheta), "t": prob.scalar("t")}

    def instances(h, th):
        P = h["P"]
        out = [("P>=I", ">", lambda v: P.at(v, th) - I),
               ("P<=tI", "<", lambda v: P.at(v, th) - v["t"] * I)]
        for w in omegas:
            A = sys.eval(th, w)[0]
            for rd in rates:
                def lyap(v, A=A, rd=rd):
                    Pv = P.at(v, th)
                    return _T(A) @ Pv + Pv @ A + P.rate(v, rd) + mu * Pv
                out.append(("lyap", "<", lyap))
        return out

    def finalize(prob, h):
        prob.minimize({"t": 1.0})

    return LmiFamily(declare, instances, finalize)


def _as_system(A, name: str = "A") -> LpvStateSpace:
    if isinstance(A, LpvStateSpace):
        return A
    A = as_param(A, getattr(A, "ntheta", 0))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    return LpvStateSpace.from_matrices(A, np.zeros((n, 0)), np.zeros((0, n)), name=name, ntheta=A.ntheta)


def certify_stability(A, d: ParamDomain, mu_grid: Sequence[float] | None = None,
                      omega: OmegaPolytope | None = None, verify: bool = True,
                      margin: float = 1e-6) -> Certificate:
    """Largest mu_P on the grid with an affine P(theta) proving <A^T P> + Pdot <= -mu_P P.

    Among certificates at that mu_P the one with the smallest condition-number
    bound (P >= I, P <= t I, t minimized) is returned.
    """
    sys = _as_system(A)
    if mu_grid is None:
        mu_grid = default_mu_grid(sys, d, omega)
    mu_grid = np.sort(np.asarray(mu_grid, dtype=float))
    if np.any(mu_grid <= 0):
        raise ValueError("mu_grid must be positive")
    omegas = sys.omega_points(omega)
    grid = d.grid_points()
    check = d.refined(2).grid_points() if verify else None
    scan = []
    for mu in mu_grid[::-1]:
        fam = _stability_family(sys, d, omegas, float(mu))
        fr = solve_family(fam, grid, check, margin=margin)
        scan.append({"mu": float(mu), "status": fr.result.status, "t": float(fr.result.objective)})
        if fr.ok and (not verify or fr.verify_residual <= VERIFY_TOL):
            vals = fr.result.values
            return Certificate(
                kind="stability",
                coefficients={"P": fr.handles["P"].coefficients(vals)},
                scalars={"mu_P": float(mu), "mu": float(mu), "cond_bound": float(vals["t"][0, 0])},
                domain=d, extra_points=_extra(fr.extra, d),
                omega_vertices=[w for w in omegas if w is not None],
                solve_residual=fr.result.max_residual, verify_residual=fr.verify_residual,
                verify_counts=d.refined(2).grid_counts, eps=fr.margin, mu_scan=scan,
                meta={"system": sys.name},
            )
    raise InfeasibleError(f"no stability certificate for any mu (smallest tried {mu_grid[0]:g})", scan)


# ---------------------------------------------------------------------------
# peak-to-peak gain


def _ppg_family(sys: LpvStateSpace, d: ParamDomain, omegas, mu: float) -> LmiFamily:
    n, nin, nout = sys.n, sys.nin, sys.nout
    rates = d.rate_vertices()
    Iin, Iout = np.eye(nin), np.eye(nout)
    Zin = np.zeros((nin, n))

    def declare(prob):
        return {"P": prob.affine_sym("P", n, d.ntheta)}, prob.scalar("gamma"), prob.scalar("upsilon")

    def instances(h, th):
        P = h[0]["P"]
        out = []
        for w in omegas:
            A, B, C, D = sys.eval(th, w)
            for rd in rates:
                def l1(v, A=A, B=B, rd=rd):
                    Pv = P.at(v, th)
                    tl = _T(A) @ Pv + Pv @ A + mu * Pv + P.rate(v, rd)
                    return sym_block([[tl], [_T(B) @ Pv, -v["upsilon"] * Iin]])
                out.append(("ppg1", "<", l1))

            def l2(v, C=C, D=D):
                Pv = P.at(v, th)
                return sym_block([[mu * Pv], [Zin, (v["gamma"] - v["upsilon"]) * Iin],
                                  [C, D, v["gamma"] * Iout]])
            out.append(("ppg2", ">", l2))
        return out

    def finalize(prob, h):
        prob.add_linear({"gamma": 1.0}, 0.0, ">=", "gamma>=0")
        prob.minimize({"gamma": 1.0})

    return LmiFamily(declare, instances, finalize)


def ppg_bound(sys: LpvStateSpace, d: ParamDomain, omega: OmegaPolytope | None = None,
              mu_grid: Sequence[float] | None = None, verify: bool = True,
              margin: float = 1e-6) -> tuple[float, Certificate]:
    """Smallest certified peak-to-peak gain bound over a line search in mu."""
    if mu_grid is None:
        mu_grid = default_mu_grid(sys, d, omega)
    mu_grid = np.asarray(mu_grid, dtype=float)
    omegas = sys.omega_points(omega)
    grid = d.grid_points()
    scan = []
    best = None
    solved = {}
    for mu in mu_grid:
        fr = solve_family(_ppg_family(sys, d, omegas, float(mu)), grid, None, margin=margin)
        solved[float(mu)] = fr
        g = float(fr.result.values["gamma"][0, 0]) if fr.ok else np.inf
        scan.append({"mu": float(mu), "status": fr.result.status, "gamma": g})
        log.debug("%s mu=%.4g status=%s gamma=%.6g", sys.name, mu, fr.result.status, g)
        if fr.ok and (best is None or g < best[1] - 1e-12):
            best = (float(mu), g)
    if best is None:
        raise InfeasibleError(f"{sys.name}: PPG LMIs infeasible for every mu", scan)
    # refine/verify at the best mu, falling back to the next best on failure
    order = sorted((s for s in scan if np.isfinite(s["gamma"])), key=lambda s: (s["gamma"], s["mu"]))
    check = d.refined(2).grid_points() if verify else None
    for cand in order[:3]:
        mu = cand["mu"]
        fam = _ppg_family(sys, d, omegas, mu)
        fr = solve_family(fam, grid, check, margin=margin, initial=solved[mu])
        if fr.ok and (not verify or fr.verify_residual <= VERIFY_TOL):
            vals = fr.result.values
            gamma = float(vals["gamma"][0, 0])
            cert = Certificate(
                kind="ppg",
                coefficients={"P": fr.handles[0]["P"].coefficients(vals)},
                scalars={"mu": mu, "gamma": gamma, "upsilon": float(vals["upsilon"][0, 0])},
                domain=d, extra_points=_extra(fr.extra, d),
                omega_vertices=[w for w in omegas if w is not None],
                solve_residual=fr.result.max_residual, verify_residual=fr.verify_residual,
                verify_counts=d.refined(2).grid_counts, eps=fr.margin, mu_scan=scan,
                meta={"system": sys.name},
            )
            return gamma, cert
    raise InfeasibleError(f"{sys.name}: no PPG certificate survived refined-grid verification", scan)


# ---------------------------------------------------------------------------
# baseline state feedback


def baseline_gain(A, B, d: ParamDomain, alpha: float, zeta_min: float | None = None,
                  radius: Callable | float | None = None, mu_grid=None, margin: float = 1e-6,
                  certify: bool = True):
    """Affine K_x(theta) = M(theta) X^{-1} placing closed-loop poles left of -alpha.

    Optional pole-region constraints: a damping sector (zeta >= zeta_min) and a
    disc of (possibly theta-dependent) radius.  The gain norm bound is minimized.
    Returns (K_x, stability certificate of A + B K_x, mu_P).
    """
    A = as_param(A, getattr(A, "ntheta", d.ntheta))
    B = as_param(B, getattr(B, "ntheta", d.ntheta))
    n, m = B.shape
    grid = d.grid_points()
    I_n, I_m = np.eye(n), np.eye(m)
    s = c = None
    if zeta_min is not None:
        c = float(zeta_min)
        s = float(np.sqrt(max(0.0, 1.0 - c * c)))

    def declare(prob):
        return {"X": prob.sym("X", n), "M": prob.affine_mat("M", m, n, d.ntheta), "k": prob.scalar("kappa")}

    def instances(h, th):
        At, Bt = A.eval(th), B.eval(th)
        M = h["M"]

        def acl(v):
            return At @ v["X"] + Bt @ M.at(v, th)

        out = [("decay", "<", lambda v: acl(v) + _T(acl(v)) + 2 * alpha * v["X"]),
               ("gain", ">", lambda v: sym_block([[v["kappa"] * I_m], [_T(M.at(v, th)), v["kappa"] * I_n]]))]
        if zeta_min is not None:
            def sector(v):
                S = acl(v)
                return sym_block([[s * (S + _T(S))], [c * (_T(S) - S), s * (S + _T(S))]])
            out.append(("sector", "<", sector))
        if radius is not None:
            r = float(radius(th)) if callable(radius) else float(radius)
            out.append(("disc", "<", lambda v: sym_block([[-r * v["X"]], [_T(acl(v)), -r * v["X"]]])))
        return out

    def finalize(prob, h):
        prob.add_lmi(lambda v: v["X"] - I_n, ">", "X>=I")
        prob.minimize({"kappa": 1.0})

    fr = solve_family(LmiFamily(declare, instances, finalize), grid, None, margin=margin)
    if not fr.ok:
        raise InfeasibleError(f"baseline gain LMI infeasible at alpha={alpha:g}; try a smaller decay rate")
    vals = fr.result.values
    Xinv = np.linalg.inv(vals["X"])
    Kx = ParamMatrix.from_affine([Mi @ Xinv for Mi in fr.handles["M"].coefficients(vals)])
    if not certify:
        return Kx, None, None
    from .lpv import param_add, param_matmul
    Am = param_add(A, param_matmul(B, Kx))
    if mu_grid is None:
        mu_grid = np.linspace(0.25, 2.0, 8) * 2 * alpha
    cert = certify_stability(Am, d, mu_grid)
    return Kx, cert, cert.scalars["mu_P"]


# ---------------------------------------------------------------------------
# certificate-derived scalars


def _cert_grid(cert: Certificate) -> np.ndarray:
    return np.vstack([cert.points(), cert.check_points()])


def rho_in(cert: Certificate, rho0: float) -> float:
    """rho0 * sqrt(max lambda_max(P) / min lambda_min(P)) over the certificate grid."""
    lo, hi = np.inf, 0.0
    for th in _cert_grid(cert):
        ev = np.linalg.eigvalsh(cert.P(th))
        lo, hi = min(lo, ev[0]), max(hi, ev[-1])
    if lo <= 0:
        raise ValueError("certificate matrix is not positive definite on its grid")
    return float(rho0 * np.sqrt(hi / lo))


def eig_extremes(cert: Certificate) -> tuple[float, float]:
    lo, hi = np.inf, 0.0
    for th in _cert_grid(cert):
        ev = np.linalg.eigvalsh(cert.P(th))
        lo, hi = min(lo, ev[0]), max(hi, ev[-1])
    return float(lo), float(hi)


def beta_theta(t: float, mu: float, cert: Certificate, B) -> float:
    """sqrt(sqrt(l2/l1) (1 - e^{-mu t})) * 2/(mu l1) * max ||P B|| over the certificate grid."""
    lam1, lam2 = eig_extremes(cert)
    pb = 0.0
    for th in _cert_grid(cert):
        Bt = B(th) if callable(B) else np.asarray(B, dtype=float)
        pb = max(pb, float(np.linalg.norm(cert.P(th) @ Bt, 2)))
    decay = 1.0 if np.isinf(t) else 1.0 - np.exp(-mu * t)
    return float(np.sqrt(np.sqrt(lam2 / lam1) * decay) * 2.0 / (mu * lam1) * pb)

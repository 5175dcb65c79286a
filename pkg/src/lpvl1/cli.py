"""Command-line front end: ``lpvl1 {analyze,synthesize,simulate,bench} --config FILE``.

All numerics live in the JSON configuration; flags only pick the file, the
output directory and the verbosity.  Exit codes: 0 success, 1 usage / IO /
solver error, 2 clean infeasibility.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import sdp
from .bench import BenchError
from .lmi import InfeasibleError, LpvStateSpace, ppg_bound
from .lpv import LpvModel, OmegaPolytope, ParamDomain, load_model

log = logging.getLogger("lpvl1")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}
_numlist = {"type": "array", "items": _num}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


CONFIG_SCHEMA = _obj({
    "model": {"type": "string"},
    "grid": {"type": "array", "items": {"type": "integer", "minimum": 2}},
    "omega": {"type": "array", "items": {"oneOf": [_num, _matrix]}, "minItems": 1},
    "mu_grid": _numlist,
    "output": {"type": "string"},
    "baseline": _obj({
        "alpha": {"type": ["number", "null"]},
        "alphas": _numlist,
        "wn_min": {"type": ["number", "null"]},
    }),
    "controller": _obj({"T": _pos, "a": _pos, "K": _pos, "mode": {"enum": ["filtered", "unfiltered"]}}),
    "uua": _obj({
        "enabled": {"type": "boolean"},
        "weight": _matrix,
        "bandwidth": {"type": ["number", "null"]},
        "feedthrough": {"type": ["number", "null"]},
        "mu_grid": _numlist,
        "reverify_mu_grid": _numlist,
    }),
    "uncertainty": _obj({
        "b_f0": {"type": "number", "minimum": 0},
        "L_f": {**_numlist, "description": "polynomial coefficients of L_f(delta) in increasing powers"},
        "l_f": {"type": "number", "minimum": 0},
    }, ["b_f0", "L_f", "l_f"]),
    "systems": {"type": "array", "items": _obj({
        "name": {"type": "string"}, "A": _matrix, "B": _matrix, "C": _matrix, "D": _matrix, "mu_grid": _numlist,
    }, ["A", "B", "C"])},
    "analysis": _obj({
        "maps": {"type": "array", "items": {"type": "string"}},
        "bounds": {"type": "boolean"},
        "r_bar": {"type": "number", "minimum": 0},
        "gamma1": _pos,
        "rho_r_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
    }),
    "scenario": _obj({
        "name": {"type": "string"},
        "reference": _obj({"kind": {"enum": ["step", "ramp"]}, "value": {"oneOf": [_num, _numlist]},
                           "start": {"type": "number", "minimum": 0}}, ["value"]),
        "uncertainty": {"enum": ["none", "matched", "full"]},
        "omega": _num,
        "compensation": {"enum": ["full", "matched", "none", "baseline"]},
        "horizon": {"type": "number", "minimum": 0},
        "h": _pos,
        "x0": _numlist,
        "x_hat0": _numlist,
        "record_every": {"type": "integer", "minimum": 1},
        "with_reference": {"type": "boolean"},
    }),
    "bench": {"type": "object"},
    "tolerances": _obj({
        "solver": _pos,
        "margin": {"type": "number", "minimum": 0},
        "verify": {"type": "boolean"},
    }),
})


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Parse and schema-check a configuration file; errors name the offending line or key path."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration ({exc.strerror})") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        line = _locate(text, exc.absolute_path)
        raise ConfigError(f"{path}:{line}: {where}: {exc.message}") from exc
    cfg["_base"] = str(path.parent)
    return cfg


def _locate(text: str, keypath) -> int:
    """Best-effort line number of the last string key on ``keypath``."""
    keys = [k for k in keypath if isinstance(k, str)]
    if not keys:
        return 1
    needle = json.dumps(keys[-1]) + ":"
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line.replace('" :', '":'):
            return i
    return 1


# ---------------------------------------------------------------------------
# config -> objects


def _tolerances(cfg: dict) -> dict:
    tol = cfg.get("tolerances", {})
    if "solver" in tol:
        sdp.SOLVER_TOL = float(tol["solver"])
    return {"verify": tol.get("verify", True), "margin": tol.get("margin", 1e-6)}


def _is_f16(cfg: dict) -> bool:
    return cfg.get("model") == "f16"


def build_model(cfg: dict) -> LpvModel:
    from . import f16
    spec = cfg.get("model")
    if spec is None:
        raise ConfigError("configuration needs a 'model' ('f16' or a model file path)")
    if spec == "f16":
        model = f16.build_f16_model(tuple(cfg.get("grid", f16.SOLVE_COUNTS)))
    else:
        p = Path(spec)
        if not p.is_absolute():
            p = Path(cfg.get("_base", ".")) / p
        model = load_model(p)
        if "grid" in cfg:
            model = model.with_domain(model.domain.with_counts(cfg["grid"]))
    if "omega" in cfg:
        om = OmegaPolytope([np.atleast_2d(v).tolist() for v in cfg["omega"]])
        model = LpvModel(model.A, model.B, model.C, model.domain, om, model.rho0, model.name)
    return model


def _budget(cfg: dict, model: LpvModel):
    from . import f16
    from .bounds import UncertaintyBudget
    if "uncertainty" in cfg:
        u = cfg["uncertainty"]
        coefs = [float(c) for c in u["L_f"]]
        return UncertaintyBudget(float(u["b_f0"]), lambda d, c=coefs: float(np.polyval(c[::-1], d)),
                                 float(u["l_f"]), model.omega)
    if _is_f16(cfg):
        return f16.f16_budget(model)
    return None


def build_design(cfg: dict, model: LpvModel, tol: dict):
    from . import f16
    from .design import design_controller
    b = cfg.get("baseline", {})
    u = cfg.get("uua", {})
    ctl = cfg.get("controller", {})
    f16_mode = _is_f16(cfg)
    weight = u.get("weight", f16.UUA_WEIGHT if f16_mode else None)
    kwargs = dict(
        alpha=b.get("alpha"), wn_min=b.get("wn_min", 2.0), weight=None if weight is None else np.array(weight),
        bandwidth=u.get("bandwidth", f16.UUA_BANDWIDTH if f16_mode else 200.0),
        feedthrough=u.get("feedthrough", f16.UUA_FEEDTHROUGH if f16_mode else None),
        mu_uua=u.get("mu_grid", f16.MU_UUA if f16_mode else None), verify=tol["verify"],
        uua=u.get("enabled", True),
        reverify_mu=u.get("reverify_mu_grid", f16.MU_REVERIFY if f16_mode else None),
    )
    if "alphas" in b:
        kwargs["alphas"] = b["alphas"]
    return design_controller(model, ctl.get("K", f16.K_FILTER), **kwargs)


def _explicit_system(spec: dict, idx: int) -> LpvStateSpace:
    A, B, C = (np.atleast_2d(np.asarray(spec[k], dtype=float)) for k in "ABC")
    D = np.asarray(spec["D"], dtype=float) if "D" in spec else None
    return LpvStateSpace.from_matrices(A, B, C, D, name=spec.get("name", f"system{idx}"), ntheta=0)


def _out_dir(cfg: dict, args) -> Path:
    out = Path(args.out or cfg.get("output", "lpvl1-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: dict, args) -> int:
    """PPG certificates for explicit systems and/or the model's closed-loop maps, plus the stability report."""
    from .bounds import verify_stability_condition
    from .design import CHAIN_MAPS, CORE_MAPS, bound_chain, filter_certificate, ppg_suite
    from .lpv import model_constants
    tol = _tolerances(cfg)
    out = _out_dir(cfg, args)
    summary = {"certificates": {}}
    for i, spec in enumerate(cfg.get("systems", [])):
        sys_ = _explicit_system(spec, i)
        mus = spec.get("mu_grid", cfg.get("mu_grid"))
        gamma, cert = ppg_bound(sys_, ParamDomain.lti(), None, mus, verify=tol["verify"], margin=tol["margin"])
        fname = f"certificates/ppg_{sys_.name}.json"
        cert.save(out / fname)
        summary["certificates"][sys_.name] = {"gamma": gamma, "mu": cert.mu, "file": fname}
        log.info("%s: gamma = %.6g at mu = %.4g", sys_.name, gamma, cert.mu)
    if "model" in cfg:
        model = build_model(cfg)
        design = build_design(cfg, model, tol)
        an = cfg.get("analysis", {})
        want_bounds = an.get("bounds", False)
        names = tuple(an.get("maps", CORE_MAPS)) + (CHAIN_MAPS if want_bounds else ())
        names = tuple(dict.fromkeys(names))
        suite = ppg_suite(design, names, cfg.get("mu_grid"), tol["verify"])
        design.baseline_cert.save(out / "certificates" / "baseline_P.json")
        for name, (g, cert) in suite.items():
            entry = {"gamma": g}
            if cert is not None:
                fname = f"certificates/ppg_{name}.json"
                cert.save(out / fname)
                entry.update(mu=cert.mu, file=fname)
            summary["certificates"][name] = entry
        summary["design"] = design.summary()
        budget = _budget(cfg, model)
        if budget is not None and all(k in suite for k in CORE_MAPS):
            mc = model_constants(model, model.domain, design.loop.Kx, design.loop.Kr, design.loop.Bu)
            r_bar = float(an.get("r_bar", np.deg2rad(3.0) if _is_f16(cfg) else 1.0))
            lo, hi = an.get("rho_r_range", (design.rho_in, 100 * design.rho_in))
            stab = verify_stability_condition({k: suite[k][0] for k in CORE_MAPS}, budget, mc, r_bar,
                                              design.rho_in, an.get("gamma1", 0.01), lo, hi)
            _write_json(out / "stability.json", stab)
            summary["stability"] = {k: stab[k] for k in ("feasible", "interval", "best_margin")}
            if want_bounds:
                ctl = cfg.get("controller", {})
                try:
                    F = filter_certificate(design, tol["verify"])
                    F.cert.save(out / "certificates" / "stability_F.json")
                except InfeasibleError:
                    F = None
                br = bound_chain(design, budget, r_bar, ctl.get("T", 1e-3), ctl.get("a", 10.0),
                                 {k: v[0] for k, v in suite.items()}, F, an.get("gamma1", 0.01))
                br.save(out / "bounds.json")
                summary["bounds"] = {"feasible": br.feasible, "failed": br.failed}
    elif not cfg.get("systems"):
        raise ConfigError("analyze needs 'systems' and/or 'model'")
    _write_json(out / "analysis.json", summary)
    return EXIT_OK


def cmd_synthesize(cfg: dict, args) -> int:
    """Baseline gain, feedforward gain and UUA compensator; writes certificates and sampled gains."""
    tol = _tolerances(cfg)
    out = _out_dir(cfg, args)
    model = build_model(cfg)
    design = build_design(cfg, model, tol)
    design.baseline_cert.save(out / "certificates" / "baseline_P.json")
    if design.uua_cert is not None:
        design.uua_cert.save(out / "certificates" / "uua_Hbar.json")
        design.open_cert.save(out / "certificates" / "ppg_H_xum_to_z.json")
    grid = model.domain.grid_points()
    A_H, B_H, C_H, D_H = design.Hbar.eval_batch(grid)
    gains = {
        "theta_grid": grid, "K_x": design.loop.Kx.to_dict(), "K_r": design.loop.Kr.eval_batch(grid),
        "Hbar": {"order": design.Hbar.order, "A": A_H, "B": B_H, "C": C_H, "D": D_H,
                 "sign_convention": "eta2 = C x_H + D sigma_um enters the filter input with a plus sign"},
        "summary": design.summary(),
    }
    _write_json(out / "gains.json", gains)
    if design.uua_cert is not None:
        log.info("UUA gamma = %.5g, re-verified closed-loop gamma = %.5g (open loop %.5g)",
                 design.gamma_uua, design.uua_cert.scalars.get("gamma_cl", float("nan")), design.gamma_open)
    return EXIT_OK


def _check_timing(sc: dict, ctl: dict) -> None:
    from .simulate import _steps
    h = sc.get("h", 1e-4)
    _steps(ctl.get("T", 1e-3), h, "T")
    _steps(sc.get("horizon", 10.0), h, "horizon")


def cmd_simulate(cfg: dict, args) -> int:
    """One closed-loop run (plus the ideal system and optionally the reference system)."""
    from . import f16
    from .simulate import Reference, Scenario, compare, simulate_closed_loop, simulate_ideal, simulate_reference
    tol = _tolerances(cfg)
    out = _out_dir(cfg, args)
    sc = cfg.get("scenario", {})
    ctl = cfg.get("controller", {})
    _check_timing(sc, ctl)
    model = build_model(cfg)
    design = build_design(cfg, model, tol)
    ref_spec = sc.get("reference", {"value": np.deg2rad(2.0) if _is_f16(cfg) else 1.0})
    ref = Reference(ref_spec.get("kind", "step"), ref_spec["value"], ref_spec.get("start", 0.0))
    toggle = sc.get("uncertainty", "full" if _is_f16(cfg) else "none")
    f, fname, omega = None, "none", sc.get("omega", 1.0)
    if _is_f16(cfg) and toggle != "none":
        f = f16.f16_uncertainty if toggle == "full" else f16.matched_part(model)
        fname = f"f16-{toggle}"
        omega = sc.get("omega", f16.OMEGA_TRUE)
    elif toggle != "none":
        raise ConfigError("scenario.uncertainty other than 'none' needs the built-in f16 model")
    theta = f16.f16_theta if _is_f16(cfg) else (lambda t: np.zeros((np.size(t), model.ntheta)))
    s = Scenario(
        loop=design.loop, theta=theta, reference=ref, omega=omega, f=f, horizon=sc.get("horizon", 10.0),
        h=sc.get("h", 1e-4), T=ctl.get("T", 1e-3), a=ctl.get("a", 10.0), K=design.K,
        mode=ctl.get("mode", "unfiltered"), compensation=sc.get("compensation", "full"), Hbar=design.Hbar,
        x0=sc.get("x0"), x_hat0=sc.get("x_hat0", list(f16.X_HAT0) if _is_f16(cfg) else None),
        record_every=sc.get("record_every", 1), name=sc.get("name", "run"), f_name=fname,
        theta_name="sin(2 pi t / 5) * [0.5, 1]" if _is_f16(cfg) else "zero", model_id=model.name,
    )
    tr = simulate_closed_loop(s)
    idl = simulate_ideal(s)
    tr.to_csv(out / "traces" / f"{s.name}.csv")
    idl.to_csv(out / "traces" / f"{s.name}_ideal.csv")
    metrics = {"scenario": s.describe(), "digest": s.digest(), "diverged": tr.diverged, "samples": len(tr)}
    if len(tr):
        metrics["vs_ideal"] = compare(tr, idl, skip=0.0, columns=["x", "y"])
        if sc.get("with_reference", False):
            rf = simulate_reference(s)
            rf.to_csv(out / "traces" / f"{s.name}_reference.csv")
            metrics["vs_reference"] = compare(tr, rf, skip=0.0, columns=["x", "u", "y"])
    _write_json(out / "metrics.json", metrics)
    return EXIT_OK


def cmd_bench(cfg: dict, args) -> int:
    """F-16 benchmark: certificates, bounds, simulations, report.json and plot scripts."""
    from dataclasses import fields
    from .bench import BenchConfig, run_bench
    tol = _tolerances(cfg)
    known = {f.name for f in fields(BenchConfig)}
    opts = dict(cfg.get("bench", {}))
    unknown = set(opts) - known
    if unknown:
        raise ConfigError(f"bench: unknown keys {sorted(unknown)}")
    opts.setdefault("verify", tol["verify"])
    for key in ("counts", "refs_deg", "toggles", "mu_uua", "mu_ppg", "mu_reverify"):
        if key in opts:
            opts[key] = tuple(opts[key])
    run_bench(_out_dir(cfg, args), BenchConfig(**opts))
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "synthesize": cmd_synthesize, "simulate": cmd_simulate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpvl1", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", help="output directory (overrides the config's 'output')")
    p.add_argument("--verbose", "-v", action="count", default=0, help="-v info, -vv debug")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except BenchError as exc:
        print(f"{'infeasible' if isinstance(exc.cause, InfeasibleError) else 'error'}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if isinstance(exc.cause, InfeasibleError) else EXIT_ERROR
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

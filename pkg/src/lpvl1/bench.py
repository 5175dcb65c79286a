"""F-16 benchmark runner: design, certification, bounds, simulations and report files."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import f16
from .design import CHAIN_MAPS, CORE_MAPS, bound_chain, filter_certificate, ppg_suite
from .lmi import InfeasibleError
from .lpv import save_model
from .simulate import simulate_closed_loop, simulate_ideal, simulate_reference, sup_error, estimation_error

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class BenchError(RuntimeError):
    """A benchmark stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class BenchConfig:
    counts: tuple = f16.SOLVE_COUNTS
    K: float = f16.K_FILTER
    alpha: float | None = None
    T: float = f16.T_SAMPLE
    a: float = f16.A_PRED
    h: float = f16.H_STEP
    horizon: float = 10.0
    refs_deg: tuple = f16.REFS_DEG
    toggles: tuple = f16.TOGGLES
    compare_ref_deg: float = 2.0
    skip: float = 1.0
    record_every: int = 10
    bandwidth: float | None = f16.UUA_BANDWIDTH
    feedthrough: float | None = f16.UUA_FEEDTHROUGH
    mu_uua: tuple = f16.MU_UUA
    mu_reverify: tuple = f16.MU_REVERIFY
    mu_ppg: tuple = f16.MU_PPG
    gamma1: float = 0.01
    verify: bool = True
    bounds: bool = True
    workers: int = 4
    extra: dict = field(default_factory=dict)


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, BenchError):
            raise BenchError(self.name, ev) from ev
        return False


def _gp_script(csv_name: str, header: list[str], ideal_csv: str | None, title: str) -> str:
    col = {name: i + 1 for i, name in enumerate(header)}
    x1 = col.get("x_1", col.get("x", 2))
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 't [s]'",
        "set ylabel 'x_1 [rad]'",
        f"set title '{title}'",
        f"plot '../traces/{csv_name}' using 1:{x1} with lines title 'adaptive'"
        + (f", '../traces/{ideal_csv}' using 1:{x1} with lines dashtype 2 title 'ideal'" if ideal_csv else ""),
    ]
    return "\n".join(lines) + "\n"


def _simulate_all(jobs: list, workers: int) -> list:
    """Run (kind, scenario) jobs; results are returned in submission order."""
    run = {"adaptive": simulate_closed_loop, "ideal": simulate_ideal, "reference": simulate_reference}
    if workers <= 1:
        return [run[k](s) for k, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(run[k], s) for k, s in jobs]
        return [f.result() for f in futures]


def run_bench(out_dir, config: BenchConfig | None = None) -> dict:
    """Full benchmark; writes certificates/, traces/, plots/ and report.json under ``out_dir``."""
    cfg = config or BenchConfig()
    out = Path(out_dir)
    for sub in ("certificates", "traces", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    report: dict = {"version": REPORT_VERSION, "config": _cfg_dict(cfg), "timings": timings}

    with _Stage("design", timings):
        design = f16.design_f16(tuple(cfg.counts), cfg.K, cfg.alpha, cfg.bandwidth, cfg.feedthrough,
                                cfg.mu_uua, cfg.verify, cfg.mu_reverify)
        save_model(design.model, out / "model.json")
        design.baseline_cert.save(out / "certificates" / "baseline_P.json")
        design.uua_cert.save(out / "certificates" / "uua_Hbar.json")
        design.open_cert.save(out / "certificates" / "ppg_H_xum_to_z.json")
        report["design"] = design.summary()

    with _Stage("ppg", timings):
        names = CORE_MAPS + (CHAIN_MAPS if cfg.bounds else ())
        suite = ppg_suite(design, names, cfg.mu_ppg, cfg.verify)
        for name, (g, cert) in suite.items():
            if cert is not None:
                cert.save(out / "certificates" / f"ppg_{name}.json")
        report["ppg"] = {name: {"gamma": g, "mu": None if c is None else c.mu} for name, (g, c) in suite.items()}
        report["ppg_numbers"] = {name: suite[name][0] for name in CORE_MAPS}

    if cfg.bounds:
        with _Stage("bounds", timings):
            try:
                F = filter_certificate(design, cfg.verify)
                F.cert.save(out / "certificates" / "stability_F.json")
            except InfeasibleError as exc:
                log.warning("no stability certificate for F(theta): %s", exc)
                F = None
            r_bar = float(np.deg2rad(max(cfg.refs_deg)))
            br = bound_chain(design, f16.f16_budget(design.model), r_bar, cfg.T, cfg.a,
                             {k: v[0] for k, v in suite.items()}, F, cfg.gamma1)
            br.save(out / "bounds.json")
            report["bounds"] = {k: br.to_dict()[k] for k in
                                ("feasible", "failed", "rho_in", "rho_r", "rho", "rho_u", "gamma1", "gamma0",
                                 "gamma0_bar", "gamma2", "alpha1", "alpha2", "alpha3", "reference_error", "ideal_error")}

    with _Stage("simulate", timings):
        kw = dict(horizon=cfg.horizon, h=cfg.h, T=cfg.T, a=cfg.a, record_every=cfg.record_every)
        scen = f16.f16_scenarios(design, cfg.refs_deg, cfg.toggles, **kw)
        cmp_modes = [f16.f16_scenario(design, cfg.compare_ref_deg, "full", comp, **kw)
                     for comp in ("matched", "none", "baseline")]
        ideals = [f16.f16_scenario(design, r, "none", **kw) for r in cfg.refs_deg]
        ref_sys = f16.f16_scenario(design, cfg.compare_ref_deg, "full", **kw)
        jobs = ([("adaptive", s) for s in scen + cmp_modes] + [("ideal", s) for s in ideals]
                + [("reference", ref_sys)])
        traces = _simulate_all(jobs, cfg.workers)

    with _Stage("report", timings):
        ideal_by_ref = {r: traces[len(scen) + len(cmp_modes) + i] for i, r in enumerate(cfg.refs_deg)}
        runs = []
        for (kind, s), tr in zip(jobs, traces):
            fname = f"ideal_{s.name.split('_')[0]}.csv" if kind == "ideal" else f"{kind}_{s.name}.csv"
            tr.to_csv(out / "traces" / fname)
            entry = {"kind": kind, "name": s.name, "file": f"traces/{fname}", "diverged": tr.diverged,
                     "digest": s.digest()}
            ref_deg = float(np.rad2deg(s.reference.value))
            idl = ideal_by_ref.get(_match(ref_deg, cfg.refs_deg))
            if kind != "ideal" and idl is not None and len(tr.t):
                entry["sup_x1_err"] = sup_error(tr, idl, "x", 0, cfg.skip)
                entry["sup_norm_x"] = float(np.linalg.norm(tr["x"], axis=1).max())
                entry["sup_norm_u"] = float(np.linalg.norm(tr["u"], axis=1).max())
                if kind == "adaptive":
                    entry["estimation_error"] = estimation_error(tr)
                (out / "plots" / f"{Path(fname).stem}.gp").write_text(
                    _gp_script(fname, tr.header(), f"ideal_{s.name.split('_')[0]}.csv", s.name))
            runs.append(entry)
        report["runs"] = runs
        report["comparison"] = _comparison(runs, cfg.compare_ref_deg)
        (out / "report.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True))
    return report


def _match(value: float, refs) -> float | None:
    for r in refs:
        if abs(r - value) < 1e-9:
            return r
    return None


def _comparison(runs: list, ref_deg: float) -> dict:
    tag = f"r{ref_deg:g}_full_"
    by = {e["name"][len(tag):]: e.get("sup_x1_err") for e in runs
          if e["kind"] == "adaptive" and e["name"].startswith(tag)}
    full = by.get("full")
    out = {"sup_x1_err": by}
    for other in ("baseline", "none", "matched"):
        if full is not None and by.get(other):
            out[f"full_over_{other}"] = full / by[other]
    return out


def _cfg_dict(cfg: BenchConfig) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x

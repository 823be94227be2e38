"""Seeded Monte-Carlo sweeps over problem settings, aggregated into CSV.

A scenario is a YAML file::

    version: 1
    method: bp              # bp | bootstrap | em | hbp | exact
    replicates: 100
    base_seed: 2024
    grid:                   # lists are swept (cartesian product), scalars fixed
      N: 1000
      alpha: [0.3, 0.5]     # or M
      NG: 10
      rho: [0.01, 0.05]
      pTP: 0.95
      pFP: 0.02
    assumed:                # decoder parameters: "true", a number, or (em) "alpha_half"
      rho: true
    options:                # method settings, see ``METHOD_OPTIONS``
      damping: 0.1

``sweeps:`` may replace ``grid:`` with a list of grids; their points are
concatenated in file order.  Replicate ``r`` of grid point ``g`` draws every
random quantity from ``SeedSequence(base_seed, spawn_key=(g, r))``, split
into design, states, outcomes and decoder streams, so results do not depend
on execution order or worker count and realizations are shared by every
method run with the same seed and grid.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .bootstrap import bootstrap_estimate
from .bp import AssumedParams, BpConfig, map_estimate, run_bp
from .em import EmConfig, run_bp_em
from .errors import CostGuardError, DegenerateError, DesignError
from .exact import DEFAULT_MAX_PATIENTS, exact_marginals
from .hbp import DEFAULT_NODES, BetaHyperprior, HbpConfig, run_hbp
from .metrics import CSV_COLUMNS, magnetizations, summarize, tp_fp
from .pooling import check_parameters, generate_design
from .synth import NoiseModel, generate_states, observe, true_pool_states

SCENARIO_VERSION = 1
METHODS = ("bp", "bootstrap", "em", "hbp", "exact")
GRID_KEYS = ("N", "M", "alpha", "NG", "rho", "pTP", "pFP")
METHOD_OPTIONS = {
    "bp": {"max_iterations": 1000, "damping": 0.1},
    "bootstrap": {"max_iterations": 1000, "damping": 0.1, "n_bootstrap": 1000, "z": 1.959963984540054},
    "em": {"max_iterations": 200, "damping": 0.1, "rounds": 50, "estimate_rho": True, "estimate_noise": True,
           "newton_damping": 1.0},
    "hbp": {"max_iterations": 1000, "damping": 0.1, "hyper_a": 1.0, "hyper_b": 1.0,
            "hbp_mode": "quadrature", "quad_nodes": DEFAULT_NODES, "node_damping": 0.5},
    "exact": {"max_patients": DEFAULT_MAX_PATIENTS},
}
EXTRA_COLUMNS = (
    "N", "M", "method", "grid_point", "replicates", "base_seed",
    "assumed_rho", "assumed_pTP", "assumed_pFP", "options", "n_excluded",
)
FAILURE_COLUMNS = ("grid_point", "replicate", "N", "M", "NG", "rho", "pTP", "pFP", "seed", "error")
RECOVERABLE = (DegenerateError, CostGuardError, DesignError, FloatingPointError, ValueError)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class GridPoint:
    n_patients: int
    n_tests: int
    group_size: int
    rho: float
    p_tp: float
    p_fp: float

    @property
    def alpha(self) -> float:
        return self.n_tests / self.n_patients


@dataclass(frozen=True)
class Scenario:
    method: str
    points: tuple
    replicates: int = 100
    base_seed: int = 0
    assumed: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    output: str | None = None
    timing: bool = False


# -- scenario parsing ---------------------------------------------------------

def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _expand(grid: dict) -> list[GridPoint]:
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ScenarioError(f"unknown grid keys {sorted(unknown)}")
    if ("M" in grid) == ("alpha" in grid):
        raise ScenarioError("grid needs exactly one of M or alpha")
    for key in ("N", "NG", "rho", "pTP", "pFP"):
        if key not in grid:
            raise ScenarioError(f"grid is missing {key}")
    tests_key = "M" if "M" in grid else "alpha"
    keys = ["N", tests_key, "NG", "rho", "pTP", "pFP"]
    points = []
    for n, t, g, rho, p_tp, p_fp in itertools.product(*(_as_list(grid[k]) for k in keys)):
        n = int(n)
        m = int(t) if tests_key == "M" else int(round(float(t) * n))
        try:
            check_parameters(n, m, int(g))
            NoiseModel(float(p_tp), float(p_fp))
        except (DesignError, ValueError) as exc:
            raise ScenarioError(f"grid point N={n} M={m} NG={g}: {exc}") from exc
        if not 0.0 <= float(rho) <= 1.0:
            raise ScenarioError(f"rho={rho} outside [0, 1]")
        points.append(GridPoint(n, m, int(g), float(rho), float(p_tp), float(p_fp)))
    return points


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    if raw.get("version") != SCENARIO_VERSION:
        raise ScenarioError(f"unsupported scenario version {raw.get('version')!r} (expected {SCENARIO_VERSION})")
    method = raw.get("method")
    if method not in METHODS:
        raise ScenarioError(f"method must be one of {METHODS}, got {method!r}")
    if ("grid" in raw) == ("sweeps" in raw):
        raise ScenarioError("scenario needs exactly one of grid or sweeps")
    grids = [raw["grid"]] if "grid" in raw else raw["sweeps"]
    points = tuple(p for g in grids for p in _expand(g))
    if not points:
        raise ScenarioError("scenario has no grid points")
    replicates = int(raw.get("replicates", 100))
    if replicates < 1:
        raise ScenarioError("replicates must be at least 1")
    options = dict(METHOD_OPTIONS[method])
    extra = set(raw.get("options") or {}) - set(options)
    if extra:
        raise ScenarioError(f"unknown options for {method}: {sorted(extra)}")
    options.update(raw.get("options") or {})
    assumed = dict(raw.get("assumed") or {})
    if set(assumed) - {"rho", "pTP", "pFP"}:
        raise ScenarioError("assumed keys must be among rho, pTP, pFP")
    return Scenario(
        method=method,
        points=points,
        replicates=replicates,
        base_seed=int(raw.get("base_seed", 0)),
        assumed=assumed,
        options=options,
        output=raw.get("output"),
        timing=bool(raw.get("timing", False)),
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(yaml.safe_load(fh))


# -- one replicate ------------------------------------------------------------

def replicate_seeds(base_seed: int, g: int, r: int) -> list[np.random.SeedSequence]:
    """Design, states, outcomes and decoder seeds of replicate ``r`` at grid point ``g``."""
    return np.random.SeedSequence(base_seed, spawn_key=(g, r)).spawn(4)


def _bound(value, truth: float, p: GridPoint, name: str) -> float:
    if value is None or value is True or value == "true":
        return truth
    if value == "alpha_half":
        return min(p.alpha / 2.0, 0.5)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"cannot bind assumed {name}={value!r}") from None


def assumed_params(s: Scenario, p: GridPoint) -> AssumedParams:
    rho_default = "alpha_half" if s.method == "em" else "true"
    return AssumedParams.of(
        _bound(s.assumed.get("rho", rho_default), p.rho, p, "rho"),
        _bound(s.assumed.get("pTP"), p.p_tp, p, "pTP"),
        _bound(s.assumed.get("pFP"), p.p_fp, p, "pFP"),
    )


def _reconstruction(prefix, x, calls, theta) -> dict:
    tp, fp = tp_fp(x, calls)
    out = {f"TP{prefix}": tp, f"FP{prefix}": fp}
    if theta is not None:
        mp, mm = magnetizations(x, theta)
        out[f"m_plus{prefix}"] = mp
        out[f"m_minus{prefix}"] = mm
    return out


def decode(method: str, y, d, x, params: AssumedParams, options: dict, seed, true_rho: float) -> dict:
    """Run one decoder and return its per-replicate measures."""
    o = options
    if method == "exact":
        est = exact_marginals(y, d, params, max_patients=int(o["max_patients"]))
        return _reconstruction("", x, map_estimate(est), est.theta_hat)
    cfg = BpConfig(max_iterations=int(o["max_iterations"]), damping=float(o["damping"]), seed=seed)
    if method == "bp":
        est = run_bp(y, d, params, cfg)
        return _reconstruction("", x, map_estimate(est), est.theta_hat) | {"converged": float(est.converged)}
    if method == "bootstrap":
        s = bootstrap_estimate(y, d, params, replace(cfg, seed=None), int(o["n_bootstrap"]), seed, z=float(o["z"]))
        theta = 1.0 / (1.0 + np.exp(-s.tau_point))
        out = _reconstruction("", x, s.map_decisions, theta)
        out |= _reconstruction("_boot", x, s.decisions, None)
        out["dominance_violations"] = float(((s.map_decisions == 1) & (s.decisions == 0)).sum())
        return out
    if method == "em":
        em_cfg = EmConfig(
            rounds=int(o["rounds"]), bp=cfg,
            estimate_rho=bool(o["estimate_rho"]), estimate_noise=bool(o["estimate_noise"]),
            newton_damping=float(o["newton_damping"]),
        )
        est, fitted, trace = run_bp_em(y, d, params, em_cfg)
        out = _reconstruction("", x, map_estimate(est), est.theta_hat)
        out |= {
            "rho_hat": fitted.rho, "bias": abs(fitted.rho - true_rho),
            "pTP_hat": fitted.noise.p_tp, "pFP_hat": fitted.noise.p_fp,
            "stalled_rounds": float(trace.n_stalled),
        }
        return out
    if method == "hbp":
        res = run_hbp(
            y, d, params.noise, BetaHyperprior(float(o["hyper_a"]), float(o["hyper_b"])),
            HbpConfig(bp=cfg, mode=str(o["hbp_mode"]), nodes=int(o["quad_nodes"]),
                      node_damping=float(o["node_damping"])),
        )
        out = _reconstruction("", x, map_estimate(res.estimate), res.estimate.theta_hat)
        out |= {"rho_hat": res.rho_hat, "bias": abs(res.rho_hat - true_rho), "converged": float(res.estimate.converged)}
        return out
    raise ScenarioError(f"unknown method {method!r}")


def run_replicate(s: Scenario, g: int, r: int) -> dict:
    """Measures of one replicate, or ``{"error": message}`` when the decoder fails."""
    p = s.points[g]
    d_seed, x_seed, y_seed, dec_seed = replicate_seeds(s.base_seed, g, r)
    try:
        d = generate_design(p.n_patients, p.n_tests, p.group_size, seed=d_seed)
        x = generate_states(p.n_patients, p.rho, seed=x_seed)
        y = observe(true_pool_states(d, x), NoiseModel(p.p_tp, p.p_fp), seed=y_seed)
        params = assumed_params(s, p)
        start = time.perf_counter()
        out = decode(s.method, y, d, x, params, s.options, dec_seed, p.rho)
        if s.timing:
            out["wall_clock"] = time.perf_counter() - start
        return out
    except RECOVERABLE as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def _job(args):
    s, g, r = args
    return g, r, run_replicate(s, g, r)


# -- sweep --------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list
    failures: list
    per_replicate: list

    @property
    def ok(self) -> bool:
        return not self.failures


def run_scenario(s: Scenario, workers: int = 1) -> SweepResult:
    """Run every replicate at every grid point and aggregate per grid point.

    Aggregation is keyed by grid point and ordered by replicate index, so the
    output does not depend on ``workers``.
    """
    jobs = [(s, g, r) for g in range(len(s.points)) for r in range(s.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        done = [_job(j) for j in jobs]
    done.sort(key=lambda t: (t[0], t[1]))
    a = assumed_params
    opts = ";".join(f"{k}={s.options[k]}" for k in sorted(s.options))
    rows, failures, per_rep = [], [], []
    for g, p in enumerate(s.points):
        cell = [(r, out) for gg, r, out in done if gg == g]
        params = a(s, p)
        for r, out in cell:
            seed = f"{s.base_seed}:{g}:{r}"
            if "error" in out:
                failures.append({
                    "grid_point": g, "replicate": r, "N": p.n_patients, "M": p.n_tests, "NG": p.group_size,
                    "rho": p.rho, "pTP": p.p_tp, "pFP": p.p_fp, "seed": seed, "error": out["error"],
                })
            else:
                per_rep.append({"grid_point": g, "replicate": r, "seed": seed} | out)
        metrics = sorted({k for _, out in cell if "error" not in out for k in out})
        for name in metrics:
            stats = summarize([out.get(name, math.nan) for _, out in cell if "error" not in out])
            rows.append({
                "rho": p.rho, "alpha": p.alpha, "NG": p.group_size, "pTP": p.p_tp, "pFP": p.p_fp,
                "metric": name, "value": stats.mean, "stderr": stats.stderr, "n_samples": stats.n_samples,
                "N": p.n_patients, "M": p.n_tests, "method": s.method, "grid_point": g,
                "replicates": s.replicates, "base_seed": s.base_seed,
                "assumed_rho": params.rho, "assumed_pTP": params.noise.p_tp, "assumed_pFP": params.noise.p_fp,
                "options": opts, "n_excluded": stats.n_excluded,
            })
    return SweepResult(rows, failures, per_rep)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_rows(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


def failure_manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".failures.csv")


def write_sweep(result: SweepResult, path, per_replicate_path=None) -> None:
    """Aggregate CSV at ``path``; failures go to ``<stem>.failures.csv`` next to it."""
    write_rows(result.rows, path, CSV_COLUMNS + EXTRA_COLUMNS)
    manifest = failure_manifest_path(path)
    if result.failures:
        write_rows(result.failures, manifest, FAILURE_COLUMNS)
    elif manifest.exists():
        manifest.unlink()
    if per_replicate_path is not None:
        keys = sorted({k for row in result.per_replicate for k in row} - {"grid_point", "replicate", "seed"})
        write_rows(result.per_replicate, per_replicate_path, ("grid_point", "replicate", "seed", *keys))

"""Parameter sweeps: (policy x load x replication) cells, aggregated into plot-ready CSVs.

A config is a YAML (or JSON) mapping::

    name: fig3
    system: {num_flows: 3, num_servers: 1}
    traffic: {rho: [0.2, 0.4], delay_model: bernoulli_half, horizon: 5000}
    service: {kind: exponential, rate: 1.0}
    policies: [prmp-MAF-LGFS, np-RAND-FCFS]
    penalty: {kind: max}
    replications: 200
    seed: 2018
    warmup: 0.1
    output: {dir: results/fig3, dump_traces: false}

``traffic`` takes either a ``rho`` grid or a ``rate`` grid (arrival rate of
generations). Every default is written back into ``manifest.json``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml
from scipy import stats

from .core import ConfigError, SystemConfig
from .coupling import check_xi_le_delta
from .distributions import ServiceDistribution, mean
from .engine import check_trace_invariants, run
from .metrics import Penalty, PenaltyLike, PenaltySchedule, time_average_penalty
from .policies import PolicySpec
from .rng import derive_seed
from .traffic import TrafficConfig, generate_poisson_schedule, rate_for_intensity, traffic_intensity

OUTPUT_ENV = "AOI_OUTPUT_DIR"

TOP_KEYS = {"name", "system", "traffic", "service", "policies", "penalty", "replications", "seed", "warmup",
            "output", "workers", "unchecked"}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    system: SystemConfig
    service: ServiceDistribution
    policies: tuple[PolicySpec, ...]
    penalty: PenaltyLike
    rhos: tuple[float, ...]
    rates: tuple[float, ...]
    horizon: float
    delay_model: str = "bernoulli_half"
    delay: float = 0.0
    replications: int = 200
    seed: int = 2018
    warmup: float = 0.1
    output_dir: str = "results"
    dump_traces: bool = False
    workers: int = 1
    unchecked: bool = False
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "system": asdict(self.system),
            "service": self.service.to_dict(),
            "service_mean": mean(self.service),
            "policies": [p.name for p in self.policies],
            "penalty": _penalty_label(self.penalty),
            "traffic": {"rho": list(self.rhos), "rate": list(self.rates), "horizon": self.horizon,
                        "delay_model": self.delay_model, "delay": self.delay},
            "replications": self.replications,
            "seed": self.seed,
            "warmup": self.warmup,
            "output": {"dir": self.output_dir, "dump_traces": self.dump_traces},
            "workers": self.workers,
            "unchecked": self.unchecked,
        }


def _penalty_label(p: PenaltyLike) -> str:
    return p.label


def _parse_penalty(d: Any) -> PenaltyLike:
    if not isinstance(d, dict):
        raise ConfigError(f"penalty must be a mapping, got {d!r}")
    if "schedule" in d:
        pieces = tuple((float(piece["start"]), Penalty.from_dict(piece["penalty"])) for piece in d["schedule"])
        return PenaltySchedule(pieces)
    return Penalty.from_dict(d)


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping; all problems are collected into one ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    errors: list[str] = []
    unknown = set(raw) - TOP_KEYS
    if unknown:
        errors.append(f"unknown keys: {sorted(unknown)}")
    for key in ("system", "traffic", "service", "policies"):
        if key not in raw:
            errors.append(f"missing key: {key}")
    if errors:
        raise ConfigError("; ".join(errors))

    def attempt(key, fn):
        try:
            return fn()
        except (ConfigError, KeyError, TypeError, ValueError) as exc:
            errors.append(f"{key}: {exc}")
            return None

    sysd = raw["system"]
    system = attempt("system", lambda: SystemConfig(int(sysd["num_flows"]), int(sysd["num_servers"]),
                                                    sysd.get("initial_age", 0.0)))
    service = attempt("service", lambda: ServiceDistribution.from_dict(raw["service"]))
    policies = attempt("policies", lambda: tuple(PolicySpec.from_name(n) for n in _as_list(raw["policies"])))
    if policies is not None and not policies:
        errors.append("policies: empty list")
    penalty = attempt("penalty", lambda: _parse_penalty(raw.get("penalty", {"kind": "avg"})))

    tr = raw["traffic"] if isinstance(raw["traffic"], dict) else {}
    if ("rho" in tr) == ("rate" in tr):
        errors.append("traffic: give exactly one of 'rho' or 'rate'")
    horizon = tr.get("horizon", 1e5)
    if not (isinstance(horizon, (int, float)) and horizon > 0):
        errors.append("traffic.horizon: must be positive")
    delay_model = tr.get("delay_model", "bernoulli_half")
    if delay_model not in ("zero", "bernoulli_half", "fixed"):
        errors.append(f"traffic.delay_model: must be one of zero/bernoulli_half/fixed, got {delay_model!r}")
    grid = _as_list(tr.get("rho", tr.get("rate", [])))
    if not grid or any(not (isinstance(x, (int, float)) and x > 0) for x in grid):
        errors.append("traffic.rho/rate: need a non-empty list of positive numbers")
    elif len(set(grid)) != len(grid):
        errors.append("traffic.rho/rate: duplicate grid values")

    reps = raw.get("replications", 200)
    if not (isinstance(reps, int) and not isinstance(reps, bool) and reps >= 1):
        errors.append(f"replications: must be an integer >= 1, got {reps!r}")
    warmup = raw.get("warmup", 0.1)
    if not (isinstance(warmup, (int, float)) and 0 <= warmup < 0.5):
        errors.append(f"warmup: must lie in [0, 0.5), got {warmup!r}")
    seed = raw.get("seed", 2018)
    if not isinstance(seed, int):
        errors.append("seed: must be an integer")
    workers = raw.get("workers", 1)
    if not (isinstance(workers, int) and workers >= 1):
        errors.append("workers: must be an integer >= 1")
    out = raw.get("output", {}) or {}
    if errors:
        raise ConfigError("; ".join(errors))

    EX = mean(service)
    N, M = system.num_flows, system.num_servers
    if "rho" in tr:
        rhos = tuple(float(r) for r in grid)
        rates = tuple(rate_for_intensity(r, N, M, 1.0 / EX) for r in rhos)
    else:
        rates = tuple(float(r) for r in grid)
        rhos = tuple(traffic_intensity(r, N, M, 1.0 / EX) for r in rates)
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        system=system,
        service=service,
        policies=policies,
        penalty=penalty,
        rhos=rhos,
        rates=rates,
        horizon=float(horizon),
        delay_model=delay_model,
        delay=float(tr.get("delay", 0.0)),
        replications=reps,
        seed=seed,
        warmup=float(warmup),
        output_dir=str(out.get("dir", "results")),
        dump_traces=bool(out.get("dump_traces", False)),
        workers=workers,
        unchecked=bool(raw.get("unchecked", False)),
        raw=raw,
    )


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(raw)


def cell_seeds(base: int, policy: str, rho: float, rep: int) -> tuple[int, int]:
    """(schedule seed, service seed). The schedule depends only on (rho, rep), so every
    policy sees the same arrivals; the service seed also keys on the policy name."""
    return derive_seed(base, "schedule", repr(float(rho)), rep), derive_seed(base, "service", policy, repr(float(rho)), rep)


def _run_cell(cfg: ExperimentConfig, rho_idx: int, rep: int, trace_dir: Optional[str]) -> list[dict]:
    rho, rate = cfg.rhos[rho_idx], cfg.rates[rho_idx]
    sched_seed, _ = cell_seeds(cfg.seed, "", rho, rep)
    sched = generate_poisson_schedule(TrafficConfig(rate=rate, horizon=cfg.horizon, delay_model=cfg.delay_model,
                                                    seed=sched_seed, delay=cfg.delay))
    t0 = cfg.warmup * cfg.horizon
    rows = []
    for spec in cfg.policies:
        _, svc_seed = cell_seeds(cfg.seed, spec.name, rho, rep)
        tr = run(cfg.system, sched, cfg.service, spec, cfg.horizon, svc_seed, unchecked=cfg.unchecked)
        check_trace_invariants(tr)
        rows.append({
            "policy": spec.name,
            "rho": rho,
            "rate": rate,
            "rep": rep,
            "schedule_seed": sched_seed,
            "service_seed": svc_seed,
            "value": time_average_penalty(tr, cfg.penalty, t0, cfg.horizon, "delta"),
            "xi_value": time_average_penalty(tr, cfg.penalty, t0, cfg.horizon, "xi"),
            "n_delivered": tr.n_delivered,
            "xi_le_delta": check_xi_le_delta(tr).ok,
        })
        if trace_dir is not None:
            tr.write_json(Path(trace_dir) / f"{spec.name}_rho{rho:g}_rep{rep}.json")
    return rows


def _run_cell_star(args):
    return _run_cell(*args)


def collect_rows(cfg: ExperimentConfig, workers: int = 1, trace_dir: Optional[str] = None) -> list[dict]:
    """Per-replication rows for every cell, in (rho, policy, rep) order whatever the worker count."""
    jobs = [(cfg, i, rep, trace_dir) for i in range(len(cfg.rhos)) for rep in range(cfg.replications)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            chunks = list(ex.map(_run_cell_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        chunks = [_run_cell(*j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    order = {p.name: i for i, p in enumerate(cfg.policies)}
    rows.sort(key=lambda r: (cfg.rhos.index(r["rho"]), order[r["policy"]], r["rep"]))
    return rows


def ci_half_width(values, level: float = 0.95) -> float:
    """Student-t half-width of the mean; 0 for a single replication."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        return 0.0
    return float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))


def aggregate(cfg: ExperimentConfig, rows: list[dict]) -> list[dict]:
    out = []
    label = _penalty_label(cfg.penalty)
    for rho in cfg.rhos:
        for spec in cfg.policies:
            cell = [r for r in rows if r["policy"] == spec.name and r["rho"] == rho]
            vals = [r["value"] for r in cell]
            row = {"policy": spec.name, "rho": rho, "rate": cell[0]["rate"], "penalty_kind": label,
                   "mean": float(np.mean(vals)), "ci_half": ci_half_width(vals), "n_seeds": len(vals),
                   "lower_bound_mean": "", "lower_bound_ci_half": ""}
            if spec.flow_rule == "MASIF":
                lb = [r["xi_value"] for r in cell]
                row["lower_bound_mean"] = float(np.mean(lb))
                row["lower_bound_ci_half"] = ci_half_width(lb)
            out.append(row)
    return out


RESULT_COLUMNS = ["policy", "rho", "rate", "penalty_kind", "mean", "ci_half", "n_seeds", "lower_bound_mean",
                  "lower_bound_ci_half"]
REP_COLUMNS = ["policy", "rho", "rate", "rep", "schedule_seed", "service_seed", "value", "xi_value", "n_delivered",
               "xi_le_delta"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    summary: list[dict]
    output_dir: Path

    def cell(self, policy: str, rho: float) -> dict:
        for r in self.summary:
            if r["policy"] == policy and r["rho"] == rho:
                return r
        raise KeyError((policy, rho))

    def values(self, policy: str, rho: float, column: str = "value") -> np.ndarray:
        return np.array([r[column] for r in self.rows if r["policy"] == policy and r["rho"] == rho])


def resolve_output_dir(cfg: ExperimentConfig, override: Optional[Union[str, Path]] = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) / cfg.name if env else Path(cfg.output_dir)


def run_experiment(config: Union[str, Path, ExperimentConfig], output_dir: Optional[Union[str, Path]] = None,
                   workers: Optional[int] = None) -> ExperimentResult:
    """Run every (policy, rho, replication) cell and write results.csv, replications.csv, manifest.json."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = None
    if cfg.dump_traces:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
        trace_dir = str(trace_dir)
    rows = collect_rows(cfg, workers or cfg.workers, trace_dir)
    summary = aggregate(cfg, rows)
    _write_csv(out / "results.csv", RESULT_COLUMNS, summary)
    _write_csv(out / "replications.csv", REP_COLUMNS, rows)
    with open(out / "manifest.json", "w") as fh:
        json.dump(cfg.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ExperimentResult(cfg, rows, summary, out)

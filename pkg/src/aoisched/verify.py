"""Batch verification runs behind ``aoisched verify``; each returns a JSON-ready report with an ``ok`` flag."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import ConfigError
from .coupling import (CoupledRunConfig, check_samplepath_dominance, check_weak_work_efficiency, check_xi_le_delta,
                       run_coupled, xi_bound_from_samples)
from .distributions import NBU_KINDS, NBU_TOL, ServiceDistribution, mean, verify_nbu
from .engine import check_trace_invariants
from .experiment import ExperimentConfig, cell_seeds, collect_rows
from .metrics import SHIPPED_PENALTIES, Penalty, check_penalty_properties
from .rng import derive_seed, stream
from .traffic import TrafficConfig, generate_poisson_schedule

MAX_REPORTED = 20

SHIPPED_DISTRIBUTIONS = (
    ServiceDistribution.exponential(1.0),
    ServiceDistribution.shifted_exponential(1 / 3, 1.5),
    ServiceDistribution.constant(1.0),
    ServiceDistribution.erlang(3, 3.0),
)


def _schedule(cfg: ExperimentConfig, i: int, rep: int):
    seed, _ = cell_seeds(cfg.seed, "", cfg.rhos[i], rep)
    return generate_poisson_schedule(TrafficConfig(rate=cfg.rates[i], horizon=cfg.horizon,
                                                   delay_model=cfg.delay_model, seed=seed, delay=cfg.delay))


def verify_dominance(cfg: ExperimentConfig) -> dict:
    """Coupled shared-epoch runs of ``policies[0]`` against every other policy, one pair set per seed."""
    if len(cfg.policies) < 2:
        raise ConfigError("policies: need the reference policy followed by at least one comparator")
    for spec in cfg.policies[1:]:
        if not spec.work_conserving:
            raise ConfigError(f"policies: comparator {spec.name} is not work-conserving")
    P = cfg.policies[0]
    n_pairs = n_times = n_viol = 0
    xi_ok = True
    violations = []
    for i, rho in enumerate(cfg.rhos):
        for rep in range(cfg.replications):
            sched = _schedule(cfg, i, rep)
            c = CoupledRunConfig(cfg.system, sched, cfg.service, cfg.policies, cfg.horizon, "shared_epochs",
                                 derive_seed(cfg.seed, "coupling", repr(rho), rep), cfg.unchecked)
            traces = run_coupled(c)
            for tr in traces:
                check_trace_invariants(tr)
                xi_ok &= check_xi_le_delta(tr).ok
            for spec, tr in zip(cfg.policies[1:], traces[1:]):
                rep_ = check_samplepath_dominance(traces[0], tr)
                n_pairs += 1
                n_times += rep_.n_checked
                n_viol += rep_.n_violations
                for v in rep_.violations[:MAX_REPORTED - len(violations)]:
                    violations.append({"rho": rho, "rep": rep, "comparator": spec.name, **v})
    return {"check": "dominance", "ok": n_viol == 0 and xi_ok, "reference": P.name,
            "comparators": [p.name for p in cfg.policies[1:]], "rhos": list(cfg.rhos),
            "seeds": cfg.replications, "horizon": cfg.horizon, "n_pairs": n_pairs,
            "n_checked_times": n_times, "n_violations": n_viol, "xi_le_delta_ok": xi_ok,
            "violations": violations}


def verify_work_efficiency(cfg: ExperimentConfig) -> dict:
    """``policies = [P, pi]`` under the NBU quantile coupling; P must start a packet inside every
    service interval of pi during which P's queue stays non-empty."""
    if len(cfg.policies) != 2:
        raise ConfigError("policies: need exactly [P, pi]")
    n_packets = n_nonvac = 0
    ok = True
    counter = []
    for i, rho in enumerate(cfg.rhos):
        for rep in range(cfg.replications):
            sched = _schedule(cfg, i, rep)
            c = CoupledRunConfig(cfg.system, sched, cfg.service, cfg.policies, cfg.horizon, "nbu_quantile",
                                 derive_seed(cfg.seed, "coupling", repr(rho), rep), cfg.unchecked)
            P, pi = run_coupled(c)
            check_trace_invariants(P)
            check_trace_invariants(pi)
            r = check_weak_work_efficiency(P, pi)
            ok &= r.ok and check_xi_le_delta(P).ok and check_xi_le_delta(pi).ok
            n_packets += r.n_packets
            n_nonvac += r.n_nonvacuous
            for ce in r.counterexamples[:MAX_REPORTED - len(counter)]:
                counter.append({"rho": rho, "rep": rep, **ce})
    return {"check": "work-efficiency", "ok": ok, "P": cfg.policies[0].name, "pi": cfg.policies[1].name,
            "service": cfg.service.to_dict(), "n_packets": n_packets, "n_nonvacuous": n_nonvac,
            "counterexamples": counter}


def verify_xi_bound(cfg: ExperimentConfig, confidence: float = 0.99, rows: Optional[list[dict]] = None) -> dict:
    """Per-seed time-average p(Xi) of np-MASIF-LGFS against p(Delta) of each other policy, per load."""
    names = [p.name for p in cfg.policies]
    if "np-MASIF-LGFS" not in names:
        raise ConfigError("policies: must include np-MASIF-LGFS")
    for spec in cfg.policies:
        if spec.preemptive:
            raise ConfigError(f"policies: {spec.name} is preemptive; the bound covers non-preemptive policies")
    if cfg.service.kind not in NBU_KINDS:
        raise ConfigError(f"service: {cfg.service.kind} is not NBU")
    if rows is None:
        rows = collect_rows(cfg, cfg.workers)
    cells = []
    for rho in cfg.rhos:
        xi = [r["xi_value"] for r in rows if r["policy"] == "np-MASIF-LGFS" and r["rho"] == rho]
        for name in names:
            if name == "np-MASIF-LGFS":
                continue
            d = [r["value"] for r in rows if r["policy"] == name and r["rho"] == rho]
            rep = xi_bound_from_samples(xi, d, confidence)
            cells.append({"rho": rho, "comparator": name, **rep.to_dict()})
    xi_ok = all(r["xi_le_delta"] for r in rows)
    return {"check": "xi-bound", "ok": xi_ok and all(c["ok"] for c in cells), "confidence": confidence,
            "penalty": cfg.penalty.label, "xi_le_delta_ok": xi_ok, "cells": cells}


def verify_nbu_all(dists: Sequence[ServiceDistribution] = SHIPPED_DISTRIBUTIONS, grid_step: float = 0.01,
                   grid_max_factor: float = 10.0, tol: float = NBU_TOL) -> dict:
    out = []
    for d in dists:
        r = verify_nbu(d, grid_step, grid_max_factor * mean(d), tol)
        row = {"service": d.to_dict(), "ok": r.ok, "max_violation": r.max_violation,
               "max_abs_deviation": r.max_abs_deviation, "worst_point": list(r.worst_point)}
        if d.is_exponential:
            # memoryless: the inequality should hold with equality up to rounding
            row["equality"] = r.max_abs_deviation <= tol
            row["ok"] = row["ok"] and row["equality"]
        out.append(row)
    return {"check": "nbu", "ok": all(r["ok"] for r in out), "grid_step": grid_step,
            "grid_max_factor": grid_max_factor, "tol": tol, "distributions": out}


def verify_penalty_props(penalties: Sequence[Penalty] = SHIPPED_PENALTIES, trials: int = 10_000,
                         seed: int = 0) -> dict:
    out = []
    for i, p in enumerate(penalties):
        r = check_penalty_properties(p, trials, stream(derive_seed(seed, i), "verify.penalty"))
        out.append({"penalty": r.penalty, "ok": r.ok, "trials": r.trials, "symmetry_failures": r.symmetry_failures,
                    "monotonicity_failures": r.monotonicity_failures, "dominance_failures": r.dominance_failures})
    return {"check": "penalty-props", "ok": all(r["ok"] for r in out), "penalties": out}

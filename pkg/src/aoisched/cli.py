"""Command-line entry point: ``aoisched simulate | verify | schedule``.

Exit status: 0 on success or a passing check, 1 when a check fails,
2 on a configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .core import ConfigError
from .distributions import ServiceDistribution
from .experiment import load_config, parse_config, run_experiment
from .metrics import Penalty
from .traffic import TrafficConfig, generate_poisson_schedule, read_schedule_csv, write_schedule_csv
from . import verify as V

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
VERIFY_CHECKS = ("dominance", "nbu", "xi-bound", "work-efficiency", "penalty-props")


def _load_raw(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def _emit(report: dict, output: Optional[str]) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if output:
        Path(output).write_text(text + "\n")
    print(text)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    res = run_experiment(cfg, output_dir=args.output, workers=args.workers)
    print(f"wrote {res.output_dir / 'results.csv'} ({len(res.summary)} cells, {len(res.rows)} runs)")
    return EXIT_OK


def _unknown(raw: dict, allowed: set) -> None:
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"unknown keys: {sorted(extra)}")


def cmd_verify(args) -> int:
    check = args.check
    if check in ("dominance", "xi-bound", "work-efficiency"):
        if args.config is None:
            raise ConfigError(f"verify {check} needs a config file")
        cfg = parse_config(_load_raw(args.config))
        if check == "dominance":
            report = V.verify_dominance(cfg)
        elif check == "work-efficiency":
            report = V.verify_work_efficiency(cfg)
        else:
            report = V.verify_xi_bound(cfg, confidence=args.confidence)
    elif check == "nbu":
        raw = _load_raw(args.config)
        _unknown(raw, {"distributions", "grid_step", "grid_max_factor", "tol"})
        try:
            dists = tuple(ServiceDistribution.from_dict(d) for d in raw["distributions"]) \
                if "distributions" in raw else V.SHIPPED_DISTRIBUTIONS
            step, factor, tol = (float(raw.get("grid_step", 0.01)), float(raw.get("grid_max_factor", 10.0)),
                                 float(raw.get("tol", 1e-12)))
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad nbu config: {exc}") from None
        report = V.verify_nbu_all(dists, step, factor, tol)
    else:
        raw = _load_raw(args.config)
        _unknown(raw, {"penalties", "trials", "seed"})
        try:
            pens = tuple(Penalty.from_dict(p) for p in raw["penalties"]) if "penalties" in raw \
                else V.SHIPPED_PENALTIES
            trials, seed = int(raw.get("trials", 10_000)), int(raw.get("seed", 0))
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad penalty-props config: {exc}") from None
        if trials < 1:
            raise ConfigError("trials must be >= 1")
        report = V.verify_penalty_props(pens, trials, seed)
    _emit(report, args.output)
    return EXIT_OK if report["ok"] else EXIT_FAIL


def cmd_schedule(args) -> int:
    if args.action == "gen":
        tc = TrafficConfig(rate=args.rate, horizon=args.horizon, delay_model=args.delay_model, seed=args.seed,
                           delay=args.delay)
        sched = generate_poisson_schedule(tc)
        write_schedule_csv(sched, args.file)
        print(f"wrote {len(sched)} generations to {args.file} (digest {sched.digest()})")
        return EXIT_OK
    try:
        sched = read_schedule_csv(args.file)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.file}: {exc}") from None
    arr = sched.arrival_times
    out_of_order = sum(1 for a, b in zip(arr, arr[1:]) if b < a)
    _emit({"ok": True, "file": str(args.file), "generations": len(sched), "digest": sched.digest(),
           "out_of_order_arrivals": out_of_order}, None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aoisched", description="Age-of-information scheduling simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a parameter sweep from a config file")
    sim.add_argument("config")
    sim.add_argument("--output", help="output directory (overrides config and $AOI_OUTPUT_DIR)")
    sim.add_argument("--workers", type=int, help="parallel worker processes")
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="run a verification check; exit status reflects the verdict")
    ver.add_argument("check", choices=VERIFY_CHECKS)
    ver.add_argument("config", nargs="?")
    ver.add_argument("--confidence", type=float, default=0.99)
    ver.add_argument("--output", help="also write the JSON report here")
    ver.set_defaults(func=cmd_verify)

    sch = sub.add_parser("schedule", help="generate or validate an arrival schedule CSV")
    sch.add_argument("action", choices=("gen", "validate"))
    sch.add_argument("file")
    sch.add_argument("--rate", type=float, default=1.0)
    sch.add_argument("--horizon", type=float, default=100.0)
    sch.add_argument("--delay-model", default="zero", choices=("zero", "bernoulli_half", "fixed"))
    sch.add_argument("--delay", type=float, default=0.0)
    sch.add_argument("--seed", type=int, default=0)
    sch.set_defaults(func=cmd_schedule)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Run every ``aoisched verify`` check on its shipped config and print one verdict line each.

Slow: the dominance and xi-bound checks run full sweeps (tens of minutes on one core).
"""

import sys
from pathlib import Path

from aoisched.cli import main as cli_main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
CHECKS = {
    "dominance": "verify_dominance.yaml",
    "work-efficiency": "verify_work_efficiency.yaml",
    "xi-bound": "verify_xi_bound.yaml",
    "nbu": "verify_nbu.yaml",
    "penalty-props": "verify_penalty_props.yaml",
}


def main(out_dir: str = "verify_reports") -> int:
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    status = {}
    for check, cfg in CHECKS.items():
        status[check] = cli_main(["verify", check, str(CONFIGS / cfg), "--output", str(out / f"{check}.json")])
    for check, code in status.items():
        print(f"{check:16s} {'PASS' if code == 0 else 'FAIL'}")
    return max(status.values())


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))

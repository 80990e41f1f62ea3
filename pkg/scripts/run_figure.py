"""Run a figure sweep and print the mean +/- 95% CI table.

    python scripts/run_figure.py configs/fig3.yaml [--output DIR] [--workers K]
"""

import argparse
from collections import defaultdict

from aoisched.experiment import load_config, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--output")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    res = run_experiment(cfg, output_dir=args.output, workers=args.workers)
    table = defaultdict(dict)
    for row in res.summary:
        table[row["rho"]][row["policy"]] = f"{row['mean']:9.3f} +/- {row['ci_half']:.3f}"
    names = [p.name for p in cfg.policies]
    print(f"{cfg.name}: time-average {cfg.penalty.label} age, {cfg.replications} seeds per cell")
    print("rho    " + "".join(f"{n:>24}" for n in names))
    for rho in cfg.rhos:
        print(f"{rho:<7g}" + "".join(f"{table[rho][n]:>24}" for n in names))
    print(f"results in {res.output_dir}")


if __name__ == "__main__":
    main()

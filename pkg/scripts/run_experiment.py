#!/usr/bin/env python3
"""Run one experiment YAML and write its CSV (plus a markdown rendering).

    python3 scripts/run_experiment.py configs/ablation_dot.yaml --out results/ablation.csv
"""

import argparse
import logging
import time

from agil.experiments import ExperimentConfig, run_experiment, write_report
from agil.gaze_net import set_deterministic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--data", default=None, help="trial root overriding the config's data section")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = ExperimentConfig.load(args.config).with_overrides(seed=args.seed)
    set_deterministic(cfg.seed)
    start = time.perf_counter()
    out = write_report(run_experiment(cfg, args.data), args.out)
    print(out.with_suffix(".md").read_text())
    print(f"[{cfg.name or cfg.protocol}] wrote {out} in {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()

"""Full ML-100K pipeline: prepare, grid-train four models, evaluate seven rows, report.

    python scripts/run_ml100k.py --workdir runs/ml100k --jobs 4

Run from the repository root (the config uses relative data paths).  Fetch the data first
with ``scripts/fetch_ml100k.py``.
"""
from __future__ import annotations

import argparse
import sys
import time

from dcrs.experiments import StepFailed, ml100k_direction, run_ml100k


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/ml100k.yaml")
    ap.add_argument("--workdir", default="runs/ml100k")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=4)
    args = ap.parse_args()
    t0 = time.time()
    try:
        report = run_ml100k(args.config, args.workdir, args.seed, args.jobs, plots=True,
                            log=lambda s: print(s, flush=True))
    except StepFailed as exc:
        print(exc, file=sys.stderr)
        sys.exit(exc.code)
    print(report.format_table())
    print("DCRS >= NFM:", ml100k_direction(report))
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()

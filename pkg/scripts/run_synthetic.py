"""NFM vs DCRS on the default synthetic world, three seeds, same-budget grids.

    python scripts/run_synthetic.py --out runs/synthetic.json
"""
from __future__ import annotations

import argparse
import json
import time

from dcrs.experiments import run_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out")
    args = ap.parse_args()
    t0 = time.time()
    res = run_synthetic(args.seeds)
    for key in ("test_uauc", "rank_corr", "acc_ci", "acc_c", "chance", "category_uauc"):
        models = ("nfm", "dcrs") if key in ("test_uauc", "rank_corr", "category_uauc") else ("dcrs",)
        print(key, {m: round(res.mean(m, key), 4) for m in models})
    print(f"total {time.time() - t0:.0f}s")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(res.to_dict(), fh, indent=1)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Run every experiment config and summarize the fitted convergence rates.

Writes one CSV per config into scripts/output/ and prints, for each
run, the outer iteration count and the log-log slope of the total
error and of the estimator against the element count.  Expect a few
minutes in total; pass --budget-elements to shrink the runs.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from fembem.cli import fit_slope, run_experiment

HERE = Path(__file__).resolve().parent
CONFIGS = sorted((HERE / "configs").glob("*.cfg"))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--budget-elements", type=int, default=None)
    parser.add_argument("--only", default=None,
                        help="substring filter on config names")
    args = parser.parse_args()

    out_dir = HERE / "output"
    out_dir.mkdir(exist_ok=True)
    for cfg_path in CONFIGS:
        if args.only and args.only not in cfg_path.name:
            continue
        t0 = time.time()
        result = run_experiment(
            cfg_path, out_path=out_dir / (cfg_path.stem + ".csv"),
            budget_elements=args.budget_elements)
        ne = np.array([r.num_elements for r in result.records], float)
        err = np.array([r.err_h1 + r.err_gamma for r in result.records])
        est = np.array([r.est_total for r in result.records])
        try:
            s_err = f"{fit_slope(ne, err):+.3f}"
            s_est = f"{fit_slope(ne, est):+.3f}"
        except ValueError as exc:
            s_err = s_est = f"n/a ({exc})"
        print(f"{cfg_path.stem:24s} outer={len(result.records):4d} "
              f"nE={int(ne[-1]):6d} slope(err)={s_err} slope(est)={s_est} "
              f"[{time.time() - t0:.1f}s]")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Reproduce the ablation grid: supervision weight 0.1..0.6 crossed with
injection at the 1/3, 2/3 and 3/3 stages, then print the Pareto report.

Warning: 18 cells x 2000 steps is roughly 45 minutes of laptop time. Pass
--steps to shrink it.
"""

import argparse
import sys

from miniflow.config import RunConfig
from miniflow.harness import run_sweep


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--out", default="runs/sweep")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    import dataclasses

    base = dataclasses.replace(RunConfig(), steps=args.steps, out_dir=args.out, seed=args.seed)
    d = base.model.depth
    depths = sorted({max(1, d // 3), max(1, 2 * d // 3), d})
    result = run_sweep(base, lams=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], depths=depths)
    with open(result.report_text_path) as f:
        print(f.read(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())

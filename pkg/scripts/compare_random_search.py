"""Paired-seed comparison of BO against uniform random search on the synthetic landscapes.

    python scripts/compare_random_search.py --seeds 50 --budget 20
"""

import argparse
import time

import numpy as np

from cfgtune.guidance import grid_maximum, landscape_fixtures
from cfgtune.optimizer import random_search, run
from cfgtune.types import Bounds, ConvergencePolicy, RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--n-init", type=int, default=5)
    ap.add_argument("--budget", type=int, default=20, help="BO iterations after the initial design")
    ap.add_argument("--xi", type=float, default=0.01)
    args = ap.parse_args()

    bounds = Bounds()
    policy = ConvergencePolicy(score_threshold=1.0, patience=args.budget)
    print(f"{'landscape':28s} {'max':>6s} {'bo>=95%':>8s} {'bo med':>7s} {'rs med':>7s} {'bo wins':>8s}")
    for name, land in landscape_fixtures().items():
        t0 = time.perf_counter()
        _, true_max = grid_maximum(land, bounds)
        bo, rs = [], []
        for seed in range(args.seeds):
            cfg = RunConfig(bounds, args.n_init, args.budget, policy, xi=args.xi, seed=seed)
            bo.append(run(cfg, land).incumbent.score)
            rs.append(random_search(cfg, land).incumbent.score)
        bo, rs = np.array(bo), np.array(rs)
        print(
            f"{name:28s} {true_max:6.3f} {int((bo >= 0.95 * true_max).sum()):4d}/{args.seeds:<3d} "
            f"{np.median(bo):7.4f} {np.median(rs):7.4f} {int((bo > rs).sum()):4d}/{args.seeds:<3d}"
            f"  ({time.perf_counter() - t0:.0f} s)"
        )


if __name__ == "__main__":
    main()

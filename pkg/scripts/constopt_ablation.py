#!/usr/bin/env python3
"""Compare constant-optimisation strategies on a synthetic roster.

Runs the same search three times per dataset: never fitting constants,
fitting only the best expression at the end of each trial, and fitting
after every mutation. Prints solve counts and mean best R2 per strategy.
"""

import argparse

import numpy as np

from srmcts.datagen import GenConfig, make_example
from srmcts.expert_iteration import CampaignConfig, run_campaign
from srmcts.policy import ConstantCritic, UniformRandomPolicy


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--roster-size", type=int, default=12)
    parser.add_argument("--budget", type=int, default=30_000)
    parser.add_argument("--internal-max", type=int, default=6)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    gen_cfg = GenConfig(n_points=100, internal_nodes_range=(1, args.internal_max))
    roster = [
        make_example(gen_cfg, np.random.default_rng([args.seed, 3000 + i]), id=f"c-{i}")
        for i in range(args.roster_size)
    ]
    print(f"{'strategy':>10s} {'solved':>8s} {'mean best R2':>14s}")
    for strategy in ("never", "best_only", "all"):
        cfg = CampaignConfig(
            eval_budget_per_dataset=args.budget,
            constant_opt=strategy,
            seed=args.seed,
        )
        report = run_campaign(roster, UniformRandomPolicy(), ConstantCritic(), cfg)
        mean_r2 = np.mean([max(r["best_r2"], -1.0) for r in report.dataset_rows])
        print(f"{strategy:>10s} {report.solved_count:5d}/{len(roster)} {mean_r2:14.4f}")


if __name__ == "__main__":
    main()

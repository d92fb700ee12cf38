#!/usr/bin/env python3
"""Sweep the expansion width K and report solve rates per value.

Wider expansions favour breadth, K=1 degenerates to a greedy chain;
intermediate widths usually win. Runs single search trials (no online
updates) on a shared synthetic roster.
"""

import argparse

import numpy as np

from srmcts.datagen import GenConfig, load_corpus, make_example
from srmcts.expert_iteration import corpus_to_examples
from srmcts.mcts import TrialConfig, run_trial
from srmcts.policy import ConstantCritic, FactoredPolicy, LearnedCritic, UniformRandomPolicy, load_model


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--roster-size", type=int, default=20)
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--k", type=int, nargs="+", default=[1, 2, 8, 16, 32])
    parser.add_argument("--model", default=None, help="pretrained model .npz (default: uniform)")
    parser.add_argument("--internal-max", type=int, default=8,
                        help="upper internal-node count of roster targets")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    gen_cfg = GenConfig(n_points=100, internal_nodes_range=(1, args.internal_max))
    roster = [
        make_example(gen_cfg, np.random.default_rng([args.seed, 9000 + i]), id=f"sweep-{i}")
        for i in range(args.roster_size)
    ]
    if args.model:
        policy, critic, _ = load_model(args.model)
    else:
        policy, critic = UniformRandomPolicy(), ConstantCritic()

    print(f"{'K':>4s} {'solved':>8s}")
    for k in args.k:
        solved = 0
        for i, dataset in enumerate(roster):
            cfg = TrialConfig(iterations=args.iterations, k_range=(k, k))
            result = run_trial(dataset, policy, critic, cfg,
                               np.random.default_rng([args.seed, k, i]), stop_on_solve=True)
            solved += result.solved
        print(f"{k:4d} {solved:5d}/{len(roster)}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Compare policies pretrained on different mutation-size corpora.

Builds three corpora (argument-size goals 1, 10 and single-shot), trains
one policy on each, then searches the same synthetic evaluation roster
with every policy and prints the solve-rate table.
"""

import argparse
import math
import time

import numpy as np

from srmcts.datagen import GenConfig, build_corpus, load_corpus, make_example
from srmcts.expert_iteration import CampaignConfig, corpus_to_examples, run_campaign
from srmcts.mcts import TrialRanges
from srmcts.policy import FactoredPolicy, LearnedCritic, pretrain


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--corpus-size", type=int, default=2000)
    parser.add_argument("--roster-size", type=int, default=20)
    parser.add_argument("--budget", type=int, default=50_000, help="evaluations per dataset")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workdir", default="/tmp/srmcts-ablation")
    args = parser.parse_args()

    import os

    os.makedirs(args.workdir, exist_ok=True)
    gen_cfg = GenConfig(n_points=100)
    goals = {"@1": 1, "@10": 10, "@inf": math.inf}

    roster = [
        make_example(gen_cfg, np.random.default_rng([args.seed, 7000 + i]), id=f"eval-{i}")
        for i in range(args.roster_size)
    ]

    results = {}
    for name, goal in goals.items():
        corpus_path = f"{args.workdir}/corpus{name.replace('@', '_')}.jsonl"
        print(f"== {name}: building corpus ({args.corpus_size} records, goal {goal})")
        build_corpus(gen_cfg, args.corpus_size, goal, corpus_path, seed=args.seed)
        items = corpus_to_examples(load_corpus(corpus_path))
        policy = FactoredPolicy()
        t0 = time.time()
        pretrain(policy, items, rng=np.random.default_rng(args.seed), epochs=args.epochs,
                 batch_size=64, lr=0.03)
        print(f"   trained on {len(items)} steps in {time.time() - t0:.0f}s")
        cfg = CampaignConfig(
            eval_budget_per_dataset=args.budget,
            constant_opt="alternate",
            pretrain_mix_fraction=0.5,
            seed=args.seed,
        )
        report = run_campaign(roster, policy, LearnedCritic(), cfg, corpus_items=items)
        results[name] = report.solved_count
        print(f"   solved {report.solved_count}/{len(roster)}")

    print("\nsolve rate by pretraining mutation size:")
    for name, solved in results.items():
        print(f"  {name:5s} {solved}/{len(roster)}")


if __name__ == "__main__":
    main()

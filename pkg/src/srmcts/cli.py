"""Command-line interface.

Subcommands:
  generate   write a pretraining corpus (datasets + dismantling traces)
  pretrain   imitation-train the factored policy on a corpus
  search     run search trials on one CSV dataset
  bench      run a suite of CSV datasets and write report files
  pareto     rank a metrics CSV by Pareto dominance
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .bench import rank_metrics_csv, run_benchmark
from .datagen import GenConfig, build_corpus, export_tokenized, load_corpus, read_csv_dataset
from .expert_iteration import (
    CampaignConfig,
    corpus_to_examples,
    load_campaign_config,
    run_campaign,
    write_report,
)
from .expressions import to_infix
from .mcts import TrialRanges
from .metrics import split_dataset
from .policy import (
    ConstantCritic,
    FactoredPolicy,
    LearnedCritic,
    UniformRandomPolicy,
    load_model,
    mean_nll,
    pretrain,
    save_model,
    uniform_nll,
)
from .tokens import write_vocab


def _parse_goal(text: str):
    return math.inf if text in ("inf", "infinity") else int(text)


def _add_generate(subparsers):
    p = subparsers.add_parser("generate", help="write a pretraining corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--goal", default="10", help="mutation size goal: integer or 'inf'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--d-min", type=int, default=1)
    p.add_argument("--d-max", type=int, default=10)
    p.add_argument("--internal-min", type=int, default=5)
    p.add_argument("--internal-max", type=int, default=25)
    p.add_argument("--tokenized-out", default=None, help="also write a per-step token export")
    p.add_argument("--vocab-out", default=None, help="also write the token vocabulary")


def _cmd_generate(args) -> int:
    cfg = GenConfig(
        d_range=(args.d_min, args.d_max),
        n_points=args.points,
        internal_nodes_range=(args.internal_min, args.internal_max),
    )
    summary = build_corpus(cfg, args.count, _parse_goal(args.goal), args.out, seed=args.seed)
    print(f"wrote {summary.count} records to {args.out}")
    print(f"trace length histogram: {summary.trace_length_histogram}")
    print(f"rejections: {summary.rejections}")
    if args.tokenized_out:
        n = export_tokenized(args.out, args.tokenized_out)
        print(f"wrote {n} tokenized steps to {args.tokenized_out}")
    if args.vocab_out:
        n = write_vocab(args.vocab_out)
        print(f"wrote {n} vocabulary tokens to {args.vocab_out}")
    return 0


def _add_pretrain(subparsers):
    p = subparsers.add_parser("pretrain", help="imitation-train the policy on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model file (.npz)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.add_argument("--time-limit", type=float, default=None, help="seconds")


def _cmd_pretrain(args) -> int:
    records = load_corpus(args.corpus)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(records))
    n_hold = int(len(records) * args.holdout_fraction)
    held = corpus_to_examples([records[i] for i in order[:n_hold]])
    train = corpus_to_examples([records[i] for i in order[n_hold:]])
    policy = FactoredPolicy()
    history = pretrain(
        policy, train, rng=rng, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, holdout=held, time_limit=args.time_limit, verbose=True,
    )
    save_model(args.out, policy, LearnedCritic())
    print(f"final training NLL {history[-1]:.4f}")
    if held:
        trained = mean_nll(policy, held)
        uniform = uniform_nll(held)
        print(f"holdout NLL {trained:.4f} vs uniform {uniform:.4f} (ratio {trained / uniform:.3f})")
    print(f"saved model to {args.out}")
    return 0


def _add_search(subparsers):
    p = subparsers.add_parser("search", help="search one CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None, help="model .npz; default is an untrained policy")
    p.add_argument("--budget", type=int, default=500_000)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--strategy", default="alternate",
                   choices=["alternate", "never", "best_only", "all"])
    p.add_argument("--k-min", type=int, default=8)
    p.add_argument("--k-max", type=int, default=16)
    p.add_argument("--corpus", default=None, help="pretraining corpus for replay mixing")
    p.add_argument("--out", default=None, help="directory for campaign report files")


def _cmd_search(args) -> int:
    dataset = read_csv_dataset(args.data)
    train, test = split_dataset(dataset, args.split_seed)
    policy, critic = _load_or_default(args.model)
    corpus_items = corpus_to_examples(load_corpus(args.corpus)) if args.corpus else ()
    cfg = CampaignConfig(
        eval_budget_per_dataset=args.budget,
        constant_opt=args.strategy,
        trial_ranges=TrialRanges(k=(args.k_min, args.k_max), iterations=args.iterations),
        seed=args.seed,
    )
    report = run_campaign([train], policy, critic, cfg, corpus_items=corpus_items)
    row = report.dataset_rows[0]
    from .expressions import evaluate, parse_prefix
    from .metrics import r_squared

    r2_test = float("-inf")
    if row["best_prefix"]:
        best = parse_prefix(row["best_prefix"])
        r2_test = r_squared(test.y, evaluate(best, test.X))
        print(f"best expression: {to_infix(best)}")
        print(f"prefix: {row['best_prefix']}")
    print(
        f"solved={row['solved']} r2_train={row['best_r2']:.6f} r2_test={r2_test:.6f} "
        f"size={row['best_size']} evaluations={row['evaluations']} trials={row['trials']}"
    )
    if args.out:
        paths = write_report(report, args.out)
        print(f"report written to {paths['summary']}")
    return 0


def _load_or_default(model_path):
    if model_path:
        policy, critic, _ = load_model(model_path)
        return policy, critic
    return FactoredPolicy(), LearnedCritic()


def _add_bench(subparsers):
    p = subparsers.add_parser("bench", help="run a dataset suite")
    p.add_argument("--suite", required=True, help="directory of dataset CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", default=None)
    p.add_argument("--budget", type=int, default=500_000)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--seed", type=int, default=0, help="base campaign seed")
    p.add_argument("--aggregate", default="median", choices=["median", "mean"])
    p.add_argument("--corpus", default=None)
    p.add_argument("--config", default=None, help="campaign config JSON overriding the flags")
    p.add_argument("--no-curves", action="store_true")


def _cmd_bench(args) -> int:
    policy, critic = _load_or_default(args.model)
    corpus_items = corpus_to_examples(load_corpus(args.corpus)) if args.corpus else ()
    if args.config:
        _, cfg = load_campaign_config(args.config)
    else:
        cfg = CampaignConfig(
            eval_budget_per_dataset=args.budget,
            trial_ranges=TrialRanges(iterations=args.iterations),
            seed=args.seed,
        )
    paths = run_benchmark(
        args.suite, args.out, policy, critic, cfg,
        seeds=tuple(args.seeds), aggregate=args.aggregate,
        corpus_items=corpus_items, write_curves=not args.no_curves,
    )
    print(f"summary written to {paths['summary']}")
    with open(paths["aggregate"], encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def _add_pareto(subparsers):
    p = subparsers.add_parser("pareto", help="rank a metrics CSV by dominance")
    p.add_argument("--metrics", required=True, help="CSV with columns label, accuracy, size")
    p.add_argument("--out", required=True)


def _cmd_pareto(args) -> int:
    n = rank_metrics_csv(args.metrics, args.out)
    print(f"ranked {n} points into {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="srmcts", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_generate(subparsers)
    _add_pretrain(subparsers)
    _add_search(subparsers)
    _add_bench(subparsers)
    _add_pareto(subparsers)
    args = parser.parse_args(argv)
    handlers = {
        "generate": _cmd_generate,
        "pretrain": _cmd_pretrain,
        "search": _cmd_search,
        "bench": _cmd_bench,
        "pareto": _cmd_pareto,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

"""Suite benchmarking: splits, campaign runs per dataset and seed, reports.

Every dataset CSV in the suite directory is split 75/25 per seed; a
fresh copy of the model searches the training part under the campaign
budget, and the best expression (constants fitted, then simplified) is
scored on both parts. Test rows are never visible to the search or to
constant optimisation. Datasets that fail to load or exceed the feature
limit are skipped with a diagnostic, never aborting the suite.

Outputs: ``summary.csv`` (one row per dataset and seed), ``curves.jsonl``
(per-iteration search records), ``pareto.csv`` (per-dataset fronts over
test accuracy and size), ``aggregate.csv`` and ``rejects.csv``.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datagen import read_csv_dataset
from .expressions import evaluate, parse_prefix
from .metrics import ParetoPoint, pareto_ranks, r_squared, split_dataset
from .expert_iteration import CampaignConfig, _copy_critic, _copy_policy, run_campaign

SUMMARY_COLUMNS = ("dataset", "seed", "r2_train", "r2_test", "size", "solved", "evaluations", "wall_time")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_benchmark(
    suite_dir,
    out_dir,
    policy,
    critic,
    cfg: CampaignConfig = CampaignConfig(),
    *,
    seeds: Sequence[int] = (0, 1, 2),
    aggregate: str = "median",
    corpus_items: Sequence = (),
    write_curves: bool = True,
    clock: Callable[[], float] = time.monotonic,
) -> dict[str, Path]:
    """Run the suite and write report files; returns their paths.

    ``aggregate`` selects the across-dataset statistic (median or mean)
    applied to per-dataset seed averages. ``clock`` exists so reruns can
    inject a deterministic time source; every other quantity is already
    deterministic for fixed seeds in this single-threaded path.
    """
    if aggregate not in ("median", "mean"):
        raise ValueError("aggregate must be 'median' or 'mean'")
    suite_dir, out_dir = Path(suite_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out_dir / "summary.csv",
        "aggregate": out_dir / "aggregate.csv",
        "pareto": out_dir / "pareto.csv",
        "rejects": out_dir / "rejects.csv",
        "curves": out_dir / "curves.jsonl",
    }
    files = sorted(p for p in suite_dir.glob("*.csv"))
    if not files:
        raise ValueError(f"no dataset CSVs found under {suite_dir}")

    rows: list[dict] = []
    rejects: list[tuple[str, str]] = []
    curves = open(paths["curves"], "w", encoding="utf-8") if write_curves else None
    try:
        for dataset_index, csv_path in enumerate(files):
            try:
                dataset = read_csv_dataset(csv_path)
            except Exception as error:
                rejects.append((csv_path.name, str(error)))
                continue
            for split_seed in seeds:
                try:
                    rows.append(
                        _run_job(
                            dataset, dataset_index, split_seed, policy, critic, cfg,
                            corpus_items, curves, clock,
                        )
                    )
                except Exception as error:
                    rejects.append((f"{csv_path.name}#seed{split_seed}", str(error)))
    finally:
        if curves is not None:
            curves.close()

    with open(paths["summary"], "w", encoding="utf-8") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in SUMMARY_COLUMNS) + "\n")

    _write_aggregate(rows, aggregate, cfg.solve_threshold, paths["aggregate"])
    _write_pareto(rows, paths["pareto"])
    with open(paths["rejects"], "w", encoding="utf-8") as fh:
        fh.write("dataset,reason\n")
        for name, reason in rejects:
            fh.write(f"{name},{json.dumps(reason)}\n")
    return paths


def _run_job(dataset, dataset_index, split_seed, policy, critic, cfg, corpus_items, curves, clock):
    train, test = split_dataset(dataset, split_seed)
    job_seed = (cfg.seed * 1_000_003 + dataset_index * 1009 + split_seed) % (2**63)
    job_cfg = replace(cfg, seed=job_seed)
    job_policy = _copy_policy(policy)
    job_critic = _copy_critic(critic)
    started = clock()
    report = run_campaign([train], job_policy, job_critic, job_cfg, corpus_items=corpus_items)
    wall = clock() - started
    row = report.dataset_rows[0]
    if curves is not None:
        for record in report.trial_records:
            record = dict(record)
            record["dataset"] = dataset.id
            record["seed"] = split_seed
            curves.write(json.dumps(record, separators=(",", ":")) + "\n")
    r2_test = float("-inf")
    if row["best_prefix"]:
        best = parse_prefix(row["best_prefix"])
        r2_test = r_squared(test.y, evaluate(best, test.X))
    return {
        "dataset": dataset.id,
        "seed": split_seed,
        "r2_train": float(row["best_r2"]),
        "r2_test": float(r2_test),
        "size": int(row["best_size"]),
        "solved": bool(row["solved"]),
        "evaluations": int(row["evaluations"]),
        "wall_time": float(wall),
    }


def _seed_averages(rows: list[dict]) -> dict[str, dict]:
    grouped: dict[str, list[dict]] = {}
    for row in rows:
        grouped.setdefault(row["dataset"], []).append(row)
    out = {}
    for name, group in grouped.items():
        out[name] = {
            "r2_train": float(np.mean([g["r2_train"] for g in group])),
            "r2_test": float(np.mean([g["r2_test"] for g in group])),
            "size": float(np.mean([g["size"] for g in group])),
            "solve_rate": float(np.mean([1.0 if g["solved"] else 0.0 for g in group])),
        }
    return out


def _write_aggregate(rows, aggregate, threshold, path) -> None:
    averages = _seed_averages(rows)
    reducer = np.median if aggregate == "median" else np.mean
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        if averages:
            for metric in ("r2_train", "r2_test", "size", "solve_rate"):
                value = float(reducer([a[metric] for a in averages.values()]))
                fh.write(f"{aggregate}_{metric},{value!r}\n")
            fh.write(f"n_datasets,{len(averages)}\n")
            fh.write(f"solve_threshold,{threshold!r}\n")


def _write_pareto(rows, path) -> None:
    averages = _seed_averages(rows)
    labels = sorted(averages)
    points = []
    kept = []
    for label in labels:
        avg = averages[label]
        if np.isfinite(avg["r2_test"]):
            points.append(ParetoPoint(label, (-avg["r2_test"], avg["size"])))
            kept.append(label)
    ranks = pareto_ranks(points) if points else []
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,accuracy,size,rank\n")
        for label, point, rank in zip(kept, points, ranks):
            fh.write(f"{label},{-point.objectives[0]!r},{point.objectives[1]!r},{rank}\n")


def rank_metrics_csv(in_path, out_path) -> int:
    """Pareto-rank a metrics CSV with columns label, accuracy, size."""
    points = []
    with open(in_path, encoding="utf-8") as fh:
        header = [c.strip() for c in fh.readline().strip().split(",")]
        try:
            label_i, acc_i, size_i = header.index("label"), header.index("accuracy"), header.index("size")
        except ValueError:
            raise ValueError("input must have columns label, accuracy, size") from None
        for line in fh:
            if not line.strip():
                continue
            cells = line.strip().split(",")
            points.append(
                ParetoPoint(cells[label_i], (-float(cells[acc_i]), float(cells[size_i])))
            )
    ranks = pareto_ranks(points)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("label,accuracy,size,rank\n")
        for point, rank in zip(points, ranks):
            fh.write(f"{point.label},{-point.objectives[0]!r},{point.objectives[1]!r},{rank}\n")
    return len(points)

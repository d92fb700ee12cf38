"""Online refinement: harvest search results, mix batches, run campaigns.

Solved trials contribute their shortest solution trace to a FIFO replay
queue for the policy and per-node value targets to a second FIFO queue
for the critic (nodes on a solution path score 1.0, other sufficiently
visited nodes their empirical mean value). Training batches mix replay
data with pretraining corpus examples to keep the policy anchored.

A campaign drives many trials over a roster of datasets. The default
engine is strictly sequential and deterministic: one logical worker runs
a trial, the controller harvests it, the trainer takes its gradient
steps, a new snapshot version is published, and scheduling moves on
(round-robin over unsolved datasets when simultaneous, one dataset at a
time otherwise). A threaded engine with the same message flow is
available for wall-clock overlap; it does not promise determinism.
"""

from __future__ import annotations

import json
import queue as queue_module
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datagen import Dataset, GenConfig, make_example, read_csv_dataset
from .mcts import TrialConfig, TrialRanges, TrialResult, run_trial, sample_trial_config
from .policy import (
    ConstantCritic,
    CriticExample,
    FactoredPolicy,
    LearnedCritic,
    MutationExample,
    UniformRandomPolicy,
    critic_update,
    imitation_update,
)


class EmptySources(RuntimeError):
    """No replay queue nor corpus can supply a training batch."""


@dataclass
class ReplayQueues:
    mutation: deque
    critic: deque

    @staticmethod
    def with_capacity(mutation_capacity: int, critic_capacity: int) -> "ReplayQueues":
        return ReplayQueues(deque(maxlen=mutation_capacity), deque(maxlen=critic_capacity))


@dataclass(frozen=True)
class CampaignConfig:
    workers: int = 4
    trainers: int = 1
    n_min_visits: int = 8
    pretrain_mix_fraction: float = 0.5
    mutation_queue_capacity: int = 50_000
    critic_queue_capacity: int = 200_000
    eval_budget_per_dataset: int = 500_000
    wall_limit: float = 86_400.0
    total_trial_budget: Optional[int] = None
    max_trials_per_dataset: Optional[int] = None
    batch_size: int = 64
    trainer_steps_per_trial: int = 2
    policy_lr: float = 0.05
    critic_lr: float = 0.5
    scheduling: str = "simultaneous"  # or "sequential"
    constant_opt: Optional[str] = "alternate"  # alternate | never | best_only | all
    solve_threshold: float = 0.99
    trial_ranges: TrialRanges = TrialRanges()
    trial_overrides: dict = field(default_factory=dict)
    stop_when_all_solved: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pretrain_mix_fraction <= 1.0:
            raise ValueError("pretrain_mix_fraction must lie in [0, 1]")
        if self.eval_budget_per_dataset <= 0 or self.wall_limit <= 0:
            raise ValueError("budgets must be positive")
        if self.scheduling not in ("simultaneous", "sequential"):
            raise ValueError(f"unknown scheduling {self.scheduling!r}")


def harvest(result: TrialResult, queues: ReplayQueues, cfg: CampaignConfig, dataset) -> dict:
    """Push a finished trial's training signal into the replay queues.

    Only the shortest solution trace feeds the mutation queue. Critic
    targets: 1.0 for every node on any solution path, the empirical mean
    value for other nodes whose visit count exceeds ``n_min_visits``.
    """
    pushed = {"mutation_steps": 0, "critic_items": 0}
    if result.solved_traces:
        shortest = min(result.solved_traces, key=lambda t: len(t.steps))
        for step in shortest.steps:
            queues.mutation.append(MutationExample(dataset, step.state, step.mutation))
            pushed["mutation_steps"] += 1
    for expr, visits, value, on_path in result.node_stats:
        if on_path:
            queues.critic.append(CriticExample(dataset, expr, 1.0))
        elif visits > cfg.n_min_visits:
            queues.critic.append(CriticExample(dataset, expr, float(np.clip(value, 0.0, 1.0))))
        else:
            continue
        pushed["critic_items"] += 1
    return pushed


@dataclass
class TrainingBatch:
    mutation_items: list
    critic_items: list
    flags: dict


def _sample_from(source: Sequence, count: int, rng: np.random.Generator) -> list:
    if count <= 0 or not source:
        return []
    picks = rng.integers(len(source), size=count)
    return [source[i] for i in picks]


def make_training_batch(
    queues: ReplayQueues,
    corpus_items: Sequence[MutationExample],
    cfg: CampaignConfig,
    rng: np.random.Generator,
) -> TrainingBatch:
    """Mutation and critic halves in equal proportion, with fallbacks.

    Within the mutation half, ``pretrain_mix_fraction`` of the items come
    from the corpus and the rest from the replay queue; an empty source
    hands its share to the other. A missing critic source (or missing
    mutation sources) skips that half, records a flag, and lets the other
    half fill the batch.
    """
    have_queue = len(queues.mutation) > 0
    have_corpus = len(corpus_items) > 0
    have_critic = len(queues.critic) > 0
    if not (have_queue or have_corpus or have_critic):
        raise EmptySources("replay queues and corpus are all empty")
    flags = {"critic_skipped": False, "mutation_skipped": False}
    mutation_total = cfg.batch_size // 2
    critic_total = cfg.batch_size - mutation_total
    if not have_critic:
        flags["critic_skipped"] = True
        mutation_total, critic_total = cfg.batch_size, 0
    if not (have_queue or have_corpus):
        flags["mutation_skipped"] = True
        mutation_total, critic_total = 0, cfg.batch_size
    n_corpus = int(round(mutation_total * cfg.pretrain_mix_fraction))
    if not have_corpus:
        n_corpus = 0
    n_queue = mutation_total - n_corpus
    if not have_queue:
        n_corpus, n_queue = mutation_total if have_corpus else 0, 0
    mutation_items = _sample_from(corpus_items, n_corpus, rng) + _sample_from(
        list(queues.mutation), n_queue, rng
    )
    critic_items = _sample_from(list(queues.critic), critic_total, rng)
    return TrainingBatch(mutation_items, critic_items, flags)


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------

@dataclass
class _DatasetState:
    dataset: Dataset
    remaining: int
    solved: bool = False
    best_r2: float = float("-inf")
    best_expr: object = None
    best_fitted: object = None
    evaluations: int = 0
    trials: int = 0
    failures: int = 0
    busy: bool = False


@dataclass
class CampaignReport:
    dataset_rows: list[dict] = field(default_factory=list)
    trial_records: list[dict] = field(default_factory=list)
    snapshot_versions: list[int] = field(default_factory=list)
    solved_count: int = 0
    trials_run: int = 0
    wall_time: float = 0.0


def _resolve_strategy(cfg: CampaignConfig, trial_index: int) -> Optional[str]:
    if cfg.constant_opt == "alternate":
        return "never" if trial_index % 2 == 0 else "all"
    return cfg.constant_opt


def _make_trial_config(cfg: CampaignConfig, state: _DatasetState, rng) -> TrialConfig:
    overrides = dict(cfg.trial_overrides)
    overrides.setdefault("solve_threshold", cfg.solve_threshold)
    overrides["evaluation_budget"] = min(
        state.remaining, overrides.get("evaluation_budget", cfg.eval_budget_per_dataset)
    )
    overrides.setdefault("constant_opt_strategy", _resolve_strategy(cfg, state.trials))
    return sample_trial_config(rng, cfg.trial_ranges, **overrides)


def _absorb(state: _DatasetState, result: TrialResult) -> None:
    state.remaining = max(0, state.remaining - result.evaluations)
    state.evaluations += result.evaluations
    state.trials += 1
    if result.best_r2 > state.best_r2:
        state.best_r2 = result.best_r2
        state.best_expr = result.best_expr
        state.best_fitted = result.best_fitted
    if result.solved:
        state.solved = True


def _train_once(policy, critic, queues, corpus_items, cfg, rng) -> int:
    steps = 0
    for _ in range(max(1, cfg.trainers) * cfg.trainer_steps_per_trial):
        try:
            batch = make_training_batch(queues, corpus_items, cfg, rng)
        except EmptySources:
            break
        if batch.mutation_items and isinstance(policy, FactoredPolicy):
            imitation_update(policy, batch.mutation_items, cfg.policy_lr, rng)
        if batch.critic_items and isinstance(critic, LearnedCritic):
            critic_update(critic, batch.critic_items, cfg.critic_lr, rng)
        steps += 1
    return steps


def _summarize(states: list[_DatasetState], report: CampaignReport, wall: float) -> CampaignReport:
    from .expressions import simplify, to_prefix

    for state in states:
        best = state.best_fitted if state.best_fitted is not None else state.best_expr
        report.dataset_rows.append(
            {
                "dataset_id": state.dataset.id,
                "solved": state.solved,
                "best_r2": state.best_r2,
                "best_size": simplify(best).size if best is not None else 0,
                "best_prefix": " ".join(to_prefix(simplify(best))) if best is not None else "",
                "evaluations": state.evaluations,
                "trials": state.trials,
                "failures": state.failures,
            }
        )
    report.solved_count = sum(1 for s in states if s.solved)
    report.wall_time = wall
    return report


def run_campaign(
    roster: Sequence[Dataset],
    policy,
    critic,
    cfg: CampaignConfig = CampaignConfig(),
    corpus_items: Sequence[MutationExample] = (),
    mode: str = "sequential",
    queues: Optional[ReplayQueues] = None,
) -> CampaignReport:
    """Search every roster dataset under per-dataset budgets while learning.

    Solved datasets leave the schedule. The report carries one row per
    dataset plus per-trial records, including the snapshot version each
    trial used. Failed trials requeue the dataset with its remaining
    budget intact. Pass ``queues`` to inspect the harvested replay data
    afterwards.
    """
    if not roster:
        raise ValueError("roster must be non-empty")
    if mode == "threaded":
        return _run_campaign_threaded(roster, policy, critic, cfg, corpus_items, queues)
    rng = np.random.default_rng(cfg.seed)
    if queues is None:
        queues = ReplayQueues.with_capacity(cfg.mutation_queue_capacity, cfg.critic_queue_capacity)
    states = [_DatasetState(ds, cfg.eval_budget_per_dataset) for ds in roster]
    report = CampaignReport(snapshot_versions=[0])
    version = 0
    start = time.monotonic()
    cursor = 0
    while True:
        if time.monotonic() - start > cfg.wall_limit:
            break
        active = [
            s
            for s in states
            if not s.solved
            and s.remaining > 0
            and (cfg.max_trials_per_dataset is None or s.trials < cfg.max_trials_per_dataset)
        ]
        if not active or (cfg.stop_when_all_solved and all(s.solved for s in states)):
            break
        if cfg.total_trial_budget is not None and report.trials_run >= cfg.total_trial_budget:
            break
        if cfg.scheduling == "simultaneous":
            state = active[cursor % len(active)]
            cursor += 1
        else:
            state = active[0]
        trial_cfg = _make_trial_config(cfg, state, rng)
        try:
            result = run_trial(state.dataset, policy, critic, trial_cfg, rng)
        except Exception as error:  # requeue with untouched budget
            state.failures += 1
            report.trial_records.append(
                {"dataset_id": state.dataset.id, "error": repr(error), "version": version}
            )
            if state.failures > 3:
                state.remaining = 0
            continue
        report.trials_run += 1
        _absorb(state, result)
        harvest(result, queues, cfg, state.dataset)
        steps = _train_once(policy, critic, queues, corpus_items, cfg, rng)
        if steps > 0:
            version += 1
            report.snapshot_versions.append(version)
        report.trial_records.append(
            {
                "dataset_id": state.dataset.id,
                "trial": state.trials,
                "version": version,
                "solved": result.solved,
                "best_r2": result.best_r2,
                "evaluations": result.evaluations,
                "iterations": result.iterations_run,
                "counters": dict(result.counters),
                "k": trial_cfg.k_range[0],
                "strategy": trial_cfg.constant_opt_strategy,
            }
        )
    return _summarize(states, report, time.monotonic() - start)


def _run_campaign_threaded(roster, policy, critic, cfg, corpus_items, queues=None) -> CampaignReport:
    """Worker threads run trials; the main thread harvests and trains.

    Published snapshots are immutable (policy and critic copies swapped
    under a lock), so a trial never sees a half-updated parameter set.
    """
    rng = np.random.default_rng(cfg.seed)
    if queues is None:
        queues = ReplayQueues.with_capacity(cfg.mutation_queue_capacity, cfg.critic_queue_capacity)
    states = {ds.id: _DatasetState(ds, cfg.eval_budget_per_dataset) for ds in roster}
    report = CampaignReport(snapshot_versions=[0])

    lock = threading.Lock()
    published = {"version": 0, "policy": _copy_policy(policy), "critic": _copy_critic(critic)}
    job_q: queue_module.Queue = queue_module.Queue()
    result_q: queue_module.Queue = queue_module.Queue()

    def worker():
        while True:
            job = job_q.get()
            if job is None:
                return
            dataset_id, trial_cfg, seed = job
            with lock:
                view = dict(published)
            worker_rng = np.random.default_rng(seed)
            try:
                result = run_trial(
                    states[dataset_id].dataset, view["policy"], view["critic"], trial_cfg, worker_rng
                )
                result_q.put((dataset_id, view["version"], result, None))
            except Exception as error:
                result_q.put((dataset_id, view["version"], None, error))

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(max(1, cfg.workers))]
    for t in threads:
        t.start()

    def dispatchable():
        return [
            s
            for s in states.values()
            if not s.solved
            and s.remaining > 0
            and not s.busy
            and (cfg.max_trials_per_dataset is None or s.trials < cfg.max_trials_per_dataset)
        ]

    start = time.monotonic()
    outstanding = 0
    try:
        while True:
            if time.monotonic() - start > cfg.wall_limit:
                break
            if cfg.total_trial_budget is not None and report.trials_run >= cfg.total_trial_budget:
                break
            ready = dispatchable()
            if not ready and outstanding == 0:
                break
            limit = 1 if cfg.scheduling == "sequential" else max(1, cfg.workers)
            for state in ready:
                if outstanding >= limit:
                    break
                state.busy = True
                trial_cfg = _make_trial_config(cfg, state, rng)
                job_q.put((state.dataset.id, trial_cfg, int(rng.integers(2**63))))
                outstanding += 1
            if outstanding == 0:
                break
            dataset_id, version_used, result, error = result_q.get()
            outstanding -= 1
            state = states[dataset_id]
            state.busy = False
            if error is not None:
                state.failures += 1
                if state.failures > 3:
                    state.remaining = 0
                report.trial_records.append(
                    {"dataset_id": dataset_id, "error": repr(error), "version": version_used}
                )
                continue
            report.trials_run += 1
            _absorb(state, result)
            harvest(result, queues, cfg, state.dataset)
            steps = _train_once(policy, critic, queues, corpus_items, cfg, rng)
            if steps > 0:
                with lock:
                    published["version"] += 1
                    published["policy"] = _copy_policy(policy)
                    published["critic"] = _copy_critic(critic)
                    report.snapshot_versions.append(published["version"])
            report.trial_records.append(
                {
                    "dataset_id": dataset_id,
                    "trial": state.trials,
                    "version": version_used,
                    "solved": result.solved,
                    "best_r2": result.best_r2,
                    "evaluations": result.evaluations,
                }
            )
    finally:
        for _ in threads:
            job_q.put(None)
        for t in threads:
            t.join(timeout=5.0)
    return _summarize(list(states.values()), report, time.monotonic() - start)


def _copy_policy(policy):
    if isinstance(policy, FactoredPolicy):
        return FactoredPolicy({k: np.array(v) for k, v in policy.params.items()})
    return policy


def _copy_critic(critic):
    if isinstance(critic, LearnedCritic):
        return LearnedCritic({k: np.array(v) for k, v in critic.params.items()})
    return critic


# ---------------------------------------------------------------------------
# Roster assembly and report I/O
# ---------------------------------------------------------------------------

def corpus_to_examples(records) -> list[MutationExample]:
    """Flatten loaded corpus records into per-step imitation examples."""
    out = []
    for dataset, trace in records:
        for step in trace.steps:
            out.append(MutationExample(dataset, step.state, step.mutation))
    return out


def build_roster(
    external: Sequence[Dataset],
    synthetic_count: int,
    gen_cfg: GenConfig = GenConfig(),
    seed: int = 0,
) -> list[Dataset]:
    """External datasets plus freshly generated synthetic ones."""
    roster = list(external)
    for i in range(synthetic_count):
        rng = np.random.default_rng([seed, i])
        roster.append(make_example(gen_cfg, rng, id=f"roster-syn-{seed}-{i}"))
    return roster


def load_campaign_config(path) -> tuple[list[Dataset], CampaignConfig]:
    """Declarative campaign file: roster paths plus config fields."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    base = Path(path).parent
    roster = []
    for entry in raw.pop("roster", []):
        csv_path = Path(entry)
        if not csv_path.is_absolute():
            csv_path = base / csv_path
        roster.append(read_csv_dataset(csv_path))
    synthetic = raw.pop("synthetic_datasets", 0)
    seed = raw.get("seed", 0)
    if synthetic:
        roster = build_roster(roster, synthetic, seed=seed)
    ranges = raw.pop("trial_ranges", None)
    cfg_kwargs = dict(raw)
    if ranges is not None:
        cfg_kwargs["trial_ranges"] = TrialRanges(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in ranges.items()}
        )
    return roster, CampaignConfig(**cfg_kwargs)


def write_report(report: CampaignReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trials_path = out_dir / "trials.jsonl"
    with open(trials_path, "w", encoding="utf-8") as fh:
        for record in report.trial_records:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    summary_path = out_dir / "campaign.csv"
    columns = ["dataset_id", "solved", "best_r2", "best_size", "evaluations", "trials", "failures"]
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in report.dataset_rows:
            fh.write(",".join(str(row[c]) for c in columns) + "\n")
    return {"trials": trials_path, "summary": summary_path}

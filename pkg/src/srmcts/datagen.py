"""Synthetic dataset and ground-truth expression generation, plus corpora.

Inputs are drawn from a random Gaussian mixture. Ground-truth expressions
come from uniform random unary-binary tree shapes (exact uniformity over
shapes with a given internal-node count, via the usual counting DP) whose
operators and leaves are then filled in at random. A pretraining corpus
record pairs one generated dataset with the dismantling trace of its
ground truth, serialized as JSON lines.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .expressions import (
    BINARY_KINDS,
    DEFAULT_CONSTRAINTS,
    UNARY_KINDS,
    BinaryOp,
    Constant,
    ConstraintConfig,
    Node,
    UnaryOp,
    Variable,
    check_constraints,
    evaluate,
    parse_prefix,
    simplify,
    to_prefix,
    variables_used,
)
from .mutations import Mutation, MutationTrace, TraceStep, dismantle, replay
from .tokens import tokenize_action, tokenize_state

MAX_FEATURES = 10


class DegenerateSample(RuntimeError):
    """Raised when bounded resampling cannot produce an admissible example."""


@dataclass
class Dataset:
    """An (X, y) regression problem, optionally with a known generator."""

    X: np.ndarray
    y: np.ndarray
    id: str
    source: str = "synthetic_in_domain"
    ground_truth: Optional[Node] = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"bad dataset shapes X={self.X.shape} y={self.y.shape}")
        if self.X.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if not 1 <= self.X.shape[1] <= MAX_FEATURES:
            raise ValueError(f"d must be in [1, {MAX_FEATURES}], got {self.X.shape[1]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset entries must be finite")
        self.X.setflags(write=False)
        self.y.setflags(write=False)
        self._stats = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def stats(self):
        """Cached target moments and per-feature target correlations."""
        if self._stats is None:
            y = self.y
            y_std = float(y.std())
            corr = np.zeros(MAX_FEATURES)
            if y_std > 0:
                yc = (y - y.mean()) / (y_std * len(y))
                for j in range(self.d):
                    x = self.X[:, j]
                    x_std = float(x.std())
                    if x_std > 0:
                        corr[j] = float((x - x.mean()) @ yc) / x_std
            self._stats = (float(y.mean()), y_std, corr)
        return self._stats


@dataclass(frozen=True)
class GenConfig:
    d_range: tuple[int, int] = (1, 10)
    n_points: int = 200
    internal_nodes_range: tuple[int, int] = (5, 25)
    constant_scale: float = 1.0
    mixture_components: tuple[int, ...] = (1, 2, 3)
    mixture_mean_scale: float = 2.0
    mixture_var_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if self.d_range[0] > self.d_range[1] or self.internal_nodes_range[0] > self.internal_nodes_range[1]:
            raise ValueError("ranges must be non-empty")

    @staticmethod
    def out_of_domain() -> "GenConfig":
        """Larger targets (26..40 operator nodes); expect high rejection."""
        return GenConfig(internal_nodes_range=(26, 40))


@dataclass(frozen=True)
class MixtureParams:
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d)
    weights: np.ndarray  # (k,)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


def sample_mixture(cfg: GenConfig, d: int, rng: np.random.Generator) -> MixtureParams:
    k = int(rng.choice(cfg.mixture_components))
    means = rng.normal(0.0, cfg.mixture_mean_scale, size=(k, d))
    lo, hi = cfg.mixture_var_range
    variances = rng.uniform(lo, hi, size=(k, d))
    weights = rng.dirichlet(np.ones(k))
    return MixtureParams(means, variances, weights)


def draw_from_mixture(params: MixtureParams, n: int, rng: np.random.Generator) -> np.ndarray:
    k = params.weights.shape[0]
    assignments = rng.choice(k, size=n, p=params.weights)
    noise = rng.standard_normal((n, params.means.shape[1]))
    return params.means[assignments] + np.sqrt(params.variances[assignments]) * noise


def sample_inputs(cfg: GenConfig, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. rows from a freshly sampled d-dimensional Gaussian mixture."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 1 <= d <= MAX_FEATURES:
        raise ValueError(f"d must be in [1, {MAX_FEATURES}], got {d}")
    return draw_from_mixture(sample_mixture(cfg, d, rng), n, rng)


# ---------------------------------------------------------------------------
# Expression sampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _shape_counts(max_internal: int) -> tuple[int, ...]:
    """counts[m] = number of unary-binary tree shapes with m internal nodes."""
    counts = [1]  # the single leaf
    for m in range(1, max_internal + 1):
        total = counts[m - 1]  # unary root
        for i in range(m):
            total += counts[i] * counts[m - 1 - i]  # binary root split
        counts.append(total)
    return tuple(counts)


def _sample_shape(m: int, counts: tuple[int, ...], rng: np.random.Generator) -> tuple:
    """Uniform shape with m internal nodes, as nested ('leaf'|'u'|'b', ...)."""
    if m == 0:
        return ("leaf",)
    unary_weight = counts[m - 1]
    split_weights = [counts[i] * counts[m - 1 - i] for i in range(m)]
    total = unary_weight + sum(split_weights)
    pick = rng.random() * total
    if pick < unary_weight:
        return ("u", _sample_shape(m - 1, counts, rng))
    pick -= unary_weight
    for i, w in enumerate(split_weights):
        if pick < w:
            return ("b", _sample_shape(i, counts, rng), _sample_shape(m - 1 - i, counts, rng))
        pick -= w
    return ("b", _sample_shape(m - 1, counts, rng), _sample_shape(0, counts, rng))


def _fill_shape(shape: tuple, d: int, cfg: GenConfig, rng: np.random.Generator) -> Node:
    tag = shape[0]
    if tag == "leaf":
        choice = int(rng.integers(d + 1))
        if choice < d:
            return Variable(choice)
        return Constant(float(rng.normal(0.0, cfg.constant_scale)))
    if tag == "u":
        kind = UNARY_KINDS[rng.integers(len(UNARY_KINDS))]
        return UnaryOp(kind, _fill_shape(shape[1], d, cfg, rng))
    kind = BINARY_KINDS[rng.integers(len(BINARY_KINDS))]
    return BinaryOp(kind, _fill_shape(shape[1], d, cfg, rng), _fill_shape(shape[2], d, cfg, rng))


def sample_raw_expression(cfg: GenConfig, d: int, rng: np.random.Generator) -> Node:
    """One unfiltered draw: uniform shape in the internal-node range, random fill."""
    lo, hi = cfg.internal_nodes_range
    counts = _shape_counts(hi)
    m = int(rng.integers(lo, hi + 1))
    return _fill_shape(_sample_shape(m, counts, rng), d, cfg, rng)


def sample_expression(
    cfg: GenConfig,
    d: int,
    rng: np.random.Generator,
    constraints: ConstraintConfig = DEFAULT_CONSTRAINTS,
    max_attempts: int = 100,
    stats: Optional[Counter] = None,
) -> Node:
    """Simplified, constraint-satisfying ground truth over x0..x(d-1).

    Draws are rejected when the simplified tree breaks the size or
    nesting limits or references no variable at all (a constant target
    has no measurable fit quality). Not every variable needs to appear.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    for _ in range(max_attempts):
        candidate = simplify(sample_raw_expression(cfg, d, rng))
        if check_constraints(candidate, constraints) is not None:
            if stats is not None:
                stats["reject_constraints"] += 1
            continue
        if not variables_used(candidate):
            if stats is not None:
                stats["reject_constant_only"] += 1
            continue
        return candidate
    raise DegenerateSample(f"no admissible expression within {max_attempts} attempts")


def make_example(
    cfg: GenConfig,
    rng: np.random.Generator,
    id: str = "synthetic",
    source: str = "synthetic_in_domain",
    max_attempts: int = 100,
    stats: Optional[Counter] = None,
) -> Dataset:
    """A noiseless (dataset, ground truth) pair; y is valid on every row."""
    for _ in range(max_attempts):
        d = int(rng.integers(cfg.d_range[0], cfg.d_range[1] + 1))
        X = sample_inputs(cfg, cfg.n_points, d, rng)
        try:
            truth = sample_expression(cfg, d, rng, stats=stats)
        except DegenerateSample:
            continue
        outcome = evaluate(truth, X)
        if not outcome.ok:
            if stats is not None:
                stats["reject_eval_invalid"] += 1
            continue
        return Dataset(X=X, y=outcome.values, id=id, source=source, ground_truth=truth)
    raise DegenerateSample(f"no evaluable example within {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass
class CorpusSummary:
    count: int
    trace_length_histogram: dict[int, int] = field(default_factory=dict)
    rejections: dict[str, int] = field(default_factory=dict)


def _goal_repr(goal: Union[int, float]) -> Union[int, str]:
    return "inf" if math.isinf(goal) else int(goal)


def _goal_from_repr(value) -> Union[int, float]:
    return math.inf if value == "inf" else int(value)


def record_to_json(dataset: Dataset, trace: MutationTrace, goal) -> str:
    steps = []
    for i, step in enumerate(trace.steps):
        state_tokens = [] if step.state is None else to_prefix(step.state)
        steps.append(
            {
                "step_index": i,
                "state_prefix_tokens": state_tokens,
                "action_tokens": tokenize_action(step.mutation),
            }
        )
    record = {
        "dataset_id": dataset.id,
        "d": dataset.d,
        "goal": _goal_repr(goal),
        "X": [[float(v) for v in row] for row in dataset.X],
        "y": [float(v) for v in dataset.y],
        "target_prefix_tokens": to_prefix(trace.target),
        "steps": steps,
    }
    return json.dumps(record, separators=(",", ":"))


def record_from_json(line: str) -> tuple[Dataset, MutationTrace]:
    from .tokens import parse_action

    record = json.loads(line)
    target = parse_prefix(record["target_prefix_tokens"])
    dataset = Dataset(
        X=np.array(record["X"], dtype=float),
        y=np.array(record["y"], dtype=float),
        id=record["dataset_id"],
        ground_truth=target,
    )
    steps = []
    for step in record["steps"]:
        state = parse_prefix(step["state_prefix_tokens"]) if step["state_prefix_tokens"] else None
        steps.append(TraceStep(state, parse_action(step["action_tokens"])))
    return dataset, MutationTrace(tuple(steps), target)


def build_corpus(
    cfg: GenConfig,
    count: int,
    mutation_size_goal: Union[int, float],
    sink,
    seed: int = 0,
) -> CorpusSummary:
    """Write ``count`` JSONL records of datasets with dismantling traces.

    Each record gets an independent generator stream derived from (seed,
    record index), so output is byte-identical for a fixed config and
    seed and records could be produced in parallel.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    close = False
    if isinstance(sink, (str, Path)):
        sink = open(sink, "w", encoding="utf-8")
        close = True
    stats: Counter = Counter()
    histogram: Counter = Counter()
    try:
        for i in range(count):
            rng = np.random.default_rng([seed, i])
            dataset = make_example(cfg, rng, id=f"syn-{seed}-{i}", stats=stats)
            trace = dismantle(dataset.ground_truth, mutation_size_goal, rng)
            if replay(trace) != dataset.ground_truth:
                raise RuntimeError(f"corrupt trace for record {i}")
            histogram[len(trace.steps)] += 1
            sink.write(record_to_json(dataset, trace, mutation_size_goal) + "\n")
    finally:
        if close:
            sink.close()
    return CorpusSummary(count, dict(sorted(histogram.items())), dict(sorted(stats.items())))


def load_corpus(path) -> list[tuple[Dataset, MutationTrace]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_json(line))
    return out


def export_tokenized(corpus_path, out_path) -> int:
    """Flat per-step export: state tokens and action tokens per line.

    States embed the dataset context; floats use the finite triplet
    vocabulary so the file is consumable by an external sequence model.
    """
    n = 0
    with open(out_path, "w", encoding="utf-8") as out:
        for dataset, trace in load_corpus(corpus_path):
            for i, step in enumerate(trace.steps):
                line = {
                    "dataset_id": dataset.id,
                    "step_index": i,
                    "state_tokens": tokenize_state(dataset, step.state),
                    "action_tokens": tokenize_action(step.mutation, float_triplets=True),
                }
                out.write(json.dumps(line, separators=(",", ":")) + "\n")
                n += 1
    return n


# ---------------------------------------------------------------------------
# CSV dataset exchange
# ---------------------------------------------------------------------------

def read_csv_dataset(path, id: Optional[str] = None) -> Dataset:
    """Read a dataset CSV with header columns x0..x(d-1), y."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: empty file")
        columns = [c.strip() for c in header.split(",")]
        expected = [f"x{i}" for i in range(len(columns) - 1)] + ["y"]
        if columns != expected:
            if len(columns) - 1 > MAX_FEATURES:
                raise ValueError(
                    f"{path}: {len(columns) - 1} features exceed the {MAX_FEATURES}-feature limit"
                )
            raise ValueError(f"{path}: header must be x0..x{len(columns) - 2},y, got {columns}")
        if len(columns) - 1 > MAX_FEATURES:
            raise ValueError(
                f"{path}: {len(columns) - 1} features exceed the {MAX_FEATURES}-feature limit"
            )
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    data = np.array(rows, dtype=float)
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return Dataset(X=data[:, :-1], y=data[:, -1], id=id or path.stem, source="external")


def write_csv_dataset(dataset: Dataset, path) -> None:
    header = ",".join([f"x{i}" for i in range(dataset.d)] + ["y"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row, target in zip(dataset.X, dataset.y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{float(target)!r}\n")

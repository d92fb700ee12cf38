"""Accuracy and complexity metrics: R-squared, splits, Pareto ranks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .expressions import EvalOutcome

NEG_INF = float("-inf")


class LengthMismatch(ValueError):
    pass


class TooSmall(ValueError):
    pass


def r_squared(y: np.ndarray, yhat: Union[EvalOutcome, np.ndarray, None]) -> float:
    """Coefficient of determination, 1 - SSE/SST.

    An invalid prediction (an `EvalOutcome` marked invalid, ``None``, or
    any non-finite entry) scores -inf. When the targets have zero
    variance the score is 1.0 for an exact fit and -inf otherwise, so a
    perfect fit still counts as solved.
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("y must be non-empty")
    if isinstance(yhat, EvalOutcome):
        if not yhat.ok:
            return NEG_INF
        yhat = yhat.values
    if yhat is None:
        return NEG_INF
    yhat = np.asarray(yhat, dtype=float)
    if yhat.shape != y.shape:
        raise LengthMismatch(f"y has shape {y.shape}, yhat has shape {yhat.shape}")
    if not np.all(np.isfinite(yhat)):
        return NEG_INF
    residual = y - yhat
    sse = float(residual @ residual)
    centered = y - y.mean()
    sst = float(centered @ centered)
    if sst == 0.0:
        return 1.0 if sse == 0.0 else NEG_INF
    return 1.0 - sse / sst


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled 75/25 split of ``range(n)``; train gets ceil(0.75 n)."""
    if n < 4:
        raise TooSmall(f"need at least 4 rows to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = -(-3 * n // 4)  # ceil(0.75 n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def split_dataset(dataset, seed: int):
    """Split a dataset into disjoint, exhaustive train and test parts."""
    from .datagen import Dataset  # local import to avoid a cycle

    train_idx, test_idx = split_indices(dataset.X.shape[0], seed)
    make = lambda idx, tag: Dataset(
        X=dataset.X[idx],
        y=dataset.y[idx],
        id=f"{dataset.id}#{tag}{seed}",
        source=dataset.source,
        ground_truth=dataset.ground_truth,
    )
    return make(train_idx, "train"), make(test_idx, "test")


@dataclass(frozen=True)
class ParetoPoint:
    """A labelled point with objectives to minimise."""

    label: str
    objectives: tuple[float, ...]

    def __post_init__(self):
        if not all(np.isfinite(self.objectives)):
            raise ValueError(f"objectives must be finite, got {self.objectives}")


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """a dominates b: not worse anywhere, strictly better somewhere."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def pareto_ranks(points: Sequence[ParetoPoint]) -> list[int]:
    """Non-dominated front index per point (0 = best front).

    Uses the domination-count peeling scheme: one O(n^2) pass builds the
    domination graph, then fronts are peeled without re-scanning.
    """
    n = len(points)
    dominated_by = [0] * n
    dominates_list: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        oi = points[i].objectives
        for j in range(i + 1, n):
            oj = points[j].objectives
            if dominates(oi, oj):
                dominates_list[i].append(j)
                dominated_by[j] += 1
            elif dominates(oj, oi):
                dominates_list[j].append(i)
                dominated_by[i] += 1
    ranks = [-1] * n
    front = [i for i in range(n) if dominated_by[i] == 0]
    rank = 0
    while front:
        next_front = []
        for i in front:
            ranks[i] = rank
            for j in dominates_list[i]:
                dominated_by[j] -= 1
                if dominated_by[j] == 0:
                    next_front.append(j)
        front = next_front
        rank += 1
    return ranks

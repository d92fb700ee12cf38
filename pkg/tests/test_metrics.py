import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srmcts.datagen import Dataset
from srmcts.expressions import EvalOutcome
from srmcts.metrics import (
    LengthMismatch,
    ParetoPoint,
    TooSmall,
    dominates,
    pareto_ranks,
    r_squared,
    split_dataset,
    split_indices,
)

NEG_INF = float("-inf")


class TestRSquared:
    def test_exact_fit(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r_squared(y, y.copy()) == 1.0

    def test_mean_predictor(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r_squared(y, np.full(3, 2.0)) == 0.0

    def test_half(self):
        # SSE = 1, SST = 2, so R2 = 0.5
        assert r_squared(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 3.0])) == pytest.approx(0.5)

    def test_invalid_outcome(self):
        assert r_squared(np.ones(3), EvalOutcome(None, "overflow")) == NEG_INF

    def test_non_finite_predictions(self):
        assert r_squared(np.ones(3), np.array([1.0, np.nan, 1.0])) == NEG_INF

    def test_zero_variance(self):
        y = np.ones(4)
        assert r_squared(y, np.ones(4)) == 1.0
        assert r_squared(y, np.array([1.0, 1.0, 1.0, 2.0])) == NEG_INF

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            r_squared(np.ones(3), np.ones(4))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=20)
        yhat = rng.normal(size=20)
        perm = rng.permutation(20)
        assert r_squared(y[perm], yhat[perm]) == pytest.approx(r_squared(y, yhat), rel=1e-12)


class TestSplit:
    def test_75_25(self):
        train, test = split_indices(100, 0)
        assert len(train) == 75 and len(test) == 25

    def test_ceil_on_train(self):
        train, test = split_indices(5, 0)
        assert len(train) == 4 and len(test) == 1

    def test_deterministic(self):
        assert np.array_equal(split_indices(50, 3)[0], split_indices(50, 3)[0])

    def test_different_seeds_differ(self):
        assert not np.array_equal(split_indices(100, 0)[0], split_indices(100, 1)[0])

    def test_disjoint_exhaustive(self):
        train, test = split_indices(37, 5)
        union = np.sort(np.concatenate([train, test]))
        assert np.array_equal(union, np.arange(37))

    def test_shuffled_not_contiguous(self):
        train, _ = split_indices(100, 0)
        assert not np.array_equal(train, np.arange(75))

    def test_too_small(self):
        with pytest.raises(TooSmall):
            split_indices(3, 0)

    def test_dataset_split_carries_metadata(self):
        gen = np.random.default_rng(0)
        X = gen.normal(size=(40, 2))
        ds = Dataset(X=X, y=X[:, 0], id="base", source="external")
        train, test = split_dataset(ds, 1)
        assert train.n + test.n == 40
        assert train.source == "external" and test.source == "external"
        assert train.d == test.d == 2


def _brute_force_ranks(points):
    remaining = list(range(len(points)))
    ranks = [None] * len(points)
    rank = 0
    while remaining:
        front = [
            i
            for i in remaining
            if not any(
                dominates(points[j].objectives, points[i].objectives)
                for j in remaining
                if j != i
            )
        ]
        for i in front:
            ranks[i] = rank
        remaining = [i for i in remaining if i not in front]
        rank += 1
    return ranks


class TestPareto:
    def test_mutually_non_dominated(self):
        # a genuine trade-off: more accurate but larger vs less accurate but smaller
        points = [ParetoPoint("a", (-0.9, 20.0)), ParetoPoint("b", (-0.8, 10.0))]
        assert pareto_ranks(points) == [0, 0]

    def test_better_on_both_dominates(self):
        points = [ParetoPoint("a", (-0.9, 10.0)), ParetoPoint("b", (-0.8, 20.0))]
        assert pareto_ranks(points) == [0, 1]

    def test_dominated_gets_next_rank(self):
        points = [ParetoPoint("a", (-0.9, 10.0)), ParetoPoint("b", (-0.8, 10.0))]
        assert pareto_ranks(points) == [0, 1]

    def test_single_point(self):
        assert pareto_ranks([ParetoPoint("only", (0.0, 0.0))]) == [0]

    def test_equal_points_share_rank(self):
        points = [ParetoPoint("a", (1.0, 1.0)), ParetoPoint("b", (1.0, 1.0))]
        assert pareto_ranks(points) == [0, 0]

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ParetoPoint("bad", (float("inf"), 1.0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 40))
    def test_matches_brute_force(self, seed, n):
        rng = np.random.default_rng(seed)
        points = [
            ParetoPoint(str(i), tuple(np.round(rng.normal(size=2), 2))) for i in range(n)
        ]
        assert pareto_ranks(points) == _brute_force_ranks(points)

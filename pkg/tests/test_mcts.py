import math

import numpy as np
import pytest

from srmcts.datagen import Dataset, GenConfig, make_example
from srmcts.expressions import evaluate, parse_prefix, size
from srmcts.metrics import r_squared
from srmcts.mcts import (
    SearchNode,
    TrialConfig,
    TrialRanges,
    backpropagate,
    puct_score,
    run_trial,
    sample_trial_config,
    select,
)
from srmcts.mutations import replay
from srmcts.policy import ConstantCritic, FactoredPolicy, LearnedCritic, UniformRandomPolicy


def _node(node_id=0, parent=None, prior=1.0, n=0, v=0.0, expr=None):
    node = SearchNode(expr, parent, None, prior, node_id)
    node.n_visits = n
    node.v_sum = v
    return node


def _tree(children_stats):
    root = _node(0)
    for i, (n, v, prior) in enumerate(children_stats):
        child = _node(i + 1, parent=root, prior=prior, n=n, v=v)
        root.children.append(child)
    root.n_visits = sum(c.n_visits for c in root.children) or 1
    return root


class TestSelect:
    def test_hand_evaluated_scores(self):
        # scores: 0.8 + 1*(sqrt(4)/4)*0.5 = 1.05 vs 0.2 + 1*(sqrt(4)/2)*0.5 = 0.7
        root = _tree([(3, 2.4, 0.5), (1, 0.2, 0.5)])
        cfg = TrialConfig(p_uct=1.0)
        total = sum(c.n_visits for c in root.children)
        assert puct_score(root.children[0], total, 1.0) == pytest.approx(1.05)
        assert puct_score(root.children[1], total, 1.0) == pytest.approx(0.7)
        assert select(root, cfg)[-1] is root.children[0]

    def test_all_unvisited_falls_back_to_prior_then_id(self):
        root = _tree([(0, 0.0, 0.2), (0, 0.0, 0.6), (0, 0.0, 0.6)])
        path = select(root, TrialConfig(p_uct=1.0))
        assert path[-1] is root.children[1]  # higher prior wins, then lower id

    def test_single_child(self):
        root = _tree([(5, 0.1, 0.01)])
        assert select(root, TrialConfig())[-1] is root.children[0]

    def test_descends_to_leaf(self):
        root = _tree([(2, 1.0, 0.5)])
        grand = _node(9, parent=root.children[0], prior=1.0)
        root.children[0].children.append(grand)
        assert select(root, TrialConfig())[-1] is grand

    def test_matches_bruteforce_argmax(self):
        rng = np.random.default_rng(0)
        cfg = TrialConfig(p_uct=1.5)
        for _ in range(500):
            k = int(rng.integers(1, 17))
            stats = [
                (int(rng.integers(0, 20)), float(rng.uniform(0, 10)), float(rng.uniform(0, 1)))
                for _ in range(k)
            ]
            root = _tree(stats)
            total = sum(s[0] for s in stats)
            scored = []
            for child in root.children:
                v = child.v_sum / child.n_visits if child.n_visits else 0.0
                e = math.sqrt(total) / (1 + child.n_visits)
                scored.append((v + cfg.p_uct * e * child.prior, child.prior, -child.node_id))
            expected = root.children[max(range(k), key=lambda i: scored[i])]
            assert select(root, cfg)[-1] is expected


class TestBackpropagate:
    def test_no_decay(self):
        a = _node(0)
        b = _node(1, parent=a)
        c = _node(2, parent=b)
        backpropagate(c, 1.0, 1.0)
        assert (a.n_visits, b.n_visits, c.n_visits) == (1, 1, 1)
        assert (a.v_sum, b.v_sum, c.v_sum) == (1.0, 1.0, 1.0)

    def test_exponential_decay(self):
        a = _node(0)
        b = _node(1, parent=a)
        c = _node(2, parent=b)
        backpropagate(c, 1.0, 0.9)
        assert c.v_sum == pytest.approx(1.0)
        assert b.v_sum == pytest.approx(0.9)
        assert a.v_sum == pytest.approx(0.81)

    def test_mean_of_two_backups(self):
        node = _node(0)
        backpropagate(node, 0.5, 1.0)
        backpropagate(node, 0.5, 1.0)
        assert node.value_estimate == 0.5


class TestSampleTrialConfig:
    def test_discrete_frequencies(self):
        rng = np.random.default_rng(0)
        counts = {v: 0 for v in (0.8, 0.9, 0.95, 1.0)}
        n = 10_000
        for _ in range(n):
            counts[sample_trial_config(rng).depth_penalty] += 1
        for v, c in counts.items():
            assert abs(c / n - 0.25) < 0.02

    def test_ranges_respected(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            cfg = sample_trial_config(rng)
            assert 0.5 <= cfg.temperature <= 1.0
            assert 8 <= cfg.k_range[0] == cfg.k_range[1] <= 16
            assert cfg.p_uct in (0.5, 1.0, 2.0)
            assert cfg.iterations == 1000

    def test_degenerate_ranges(self):
        ranges = TrialRanges(k=(4, 4), temperature=(0.7, 0.7), depth_penalty=(1.0,), p_uct=(2.0,))
        cfg = sample_trial_config(np.random.default_rng(0), ranges)
        assert cfg.k_range == (4, 4) and cfg.temperature == 0.7
        assert cfg.depth_penalty == 1.0 and cfg.p_uct == 2.0

    def test_overrides(self):
        cfg = sample_trial_config(np.random.default_rng(0), iterations=5, evaluation_budget=99)
        assert cfg.iterations == 5 and cfg.evaluation_budget == 99


@pytest.fixture
def sum_dataset():
    rng = np.random.default_rng(3)
    X = rng.normal(0.0, 1.5, size=(200, 2))
    return Dataset(X=X, y=X[:, 0] + X[:, 1], id="sum")


class TestRunTrial:
    def test_solves_simple_target_with_uniform_policy(self, sum_dataset):
        solved = 0
        for seed in range(20):
            result = run_trial(
                sum_dataset,
                UniformRandomPolicy(),
                ConstantCritic(),
                TrialConfig(iterations=1000),
                np.random.default_rng(seed),
                stop_on_solve=True,
            )
            solved += result.solved
        assert solved >= 18  # 90% of seeds

    def test_zero_iterations_empty_result(self, sum_dataset):
        result = run_trial(
            sum_dataset, UniformRandomPolicy(), ConstantCritic(), TrialConfig(iterations=0)
        )
        assert result.best_expr is None and result.evaluations == 0
        assert not result.solved and result.iterations_run == 0

    def test_evaluation_budget_arithmetic(self, sum_dataset):
        cfg = TrialConfig(iterations=50, k_range=(4, 8))
        result = run_trial(
            sum_dataset, UniformRandomPolicy(), ConstantCritic(), cfg, np.random.default_rng(0)
        )
        assert result.evaluations <= 50 * 8

    def test_budget_cap_respected(self, sum_dataset):
        cfg = TrialConfig(iterations=1000, evaluation_budget=100)
        result = run_trial(
            sum_dataset, UniformRandomPolicy(), ConstantCritic(), cfg, np.random.default_rng(0)
        )
        assert result.evaluations <= 100

    def test_determinism(self, sum_dataset):
        cfg = TrialConfig(iterations=120)
        results = [
            run_trial(
                sum_dataset, FactoredPolicy(), LearnedCritic(), cfg, np.random.default_rng(9)
            )
            for _ in range(2)
        ]
        assert results[0].best_r2 == results[1].best_r2
        assert results[0].evaluations == results[1].evaluations
        assert results[0].best_expr == results[1].best_expr

    def test_solved_traces_replay_to_threshold(self, sum_dataset):
        result = run_trial(
            sum_dataset,
            UniformRandomPolicy(),
            ConstantCritic(),
            TrialConfig(iterations=1000),
            np.random.default_rng(1),
            stop_on_solve=True,
        )
        assert result.solved and result.solved_traces
        for trace in result.solved_traces:
            expr = replay(trace)
            assert expr == trace.target
            assert r_squared(sum_dataset.y, evaluate(expr, sum_dataset.X)) >= 0.99

    def test_per_child_backup_counting(self, sum_dataset):
        # with per-child backups, a node's visit count equals the number
        # of nodes created at or below it (absent terminal re-selections)
        from srmcts.mcts import _Trial

        trial = _Trial(
            sum_dataset, UniformRandomPolicy(), ConstantCritic(),
            TrialConfig(iterations=40, depth_penalty=1.0), np.random.default_rng(2), None, None,
        )
        result = trial.run(stop_on_solve=False)
        stack = [trial.root]
        saw_terminal = False
        while stack:
            node = stack.pop()
            saw_terminal = saw_terminal or node.terminal
            child_sum = sum(c.n_visits for c in node.children)
            expected = child_sum if node is trial.root else child_sum + 1
            assert node.n_visits >= expected
            if not saw_terminal:
                assert node.n_visits == expected
            stack.extend(node.children)
        if not saw_terminal:
            assert trial.root.n_visits == result.nodes_created

    def test_value_bounded(self, sum_dataset):
        from srmcts.mcts import _Trial

        for penalty in (0.8, 1.0):
            trial = _Trial(
                sum_dataset, UniformRandomPolicy(), ConstantCritic(),
                TrialConfig(iterations=60, depth_penalty=penalty), np.random.default_rng(4),
                None, None,
            )
            trial.run(stop_on_solve=False)
            stack = [trial.root]
            while stack:
                node = stack.pop()
                if node.n_visits:
                    assert -1e-9 <= node.value_estimate <= 1.0 + 1e-9
                stack.extend(node.children)

    def test_strict_growth_along_paths(self, sum_dataset):
        from srmcts.mcts import _Trial

        trial = _Trial(
            sum_dataset, UniformRandomPolicy(), ConstantCritic(),
            TrialConfig(iterations=50), np.random.default_rng(5), None, None,
        )
        trial.run(stop_on_solve=False)
        stack = [trial.root]
        while stack:
            node = stack.pop()
            for child in node.children:
                assert size(child.expr) > size(node.expr)
            stack.extend(node.children)

    def test_iteration_log_records(self, sum_dataset):
        records = []
        run_trial(
            sum_dataset,
            UniformRandomPolicy(),
            ConstantCritic(),
            TrialConfig(iterations=30),
            np.random.default_rng(0),
            log_sink=records.append,
        )
        assert len(records) == 30
        assert {"iteration", "depth", "k", "best_r2", "evaluations"} <= set(records[0])
        evals = [r["evaluations"] for r in records]
        assert evals == sorted(evals)

    def test_constant_opt_best_only_fits_at_end(self):
        rng = np.random.default_rng(0)
        X = rng.normal(0.0, 1.0, size=(150, 1))
        ds = Dataset(X=X, y=2.5 * X[:, 0] - 1.0, id="affine")
        cfg = TrialConfig(iterations=250, constant_opt_strategy="best_only")
        result = run_trial(ds, UniformRandomPolicy(), ConstantCritic(), cfg, np.random.default_rng(8))
        if result.best_fitted is not None:
            fitted_r2 = r_squared(ds.y, evaluate(result.best_fitted, ds.X))
            assert fitted_r2 == pytest.approx(result.best_r2, abs=1e-9)

    def test_solved_flag_iff_threshold(self, sum_dataset):
        result = run_trial(
            sum_dataset,
            UniformRandomPolicy(),
            ConstantCritic(),
            TrialConfig(iterations=400),
            np.random.default_rng(7),
            stop_on_solve=True,
        )
        assert result.solved == (result.best_r2 >= 0.99)

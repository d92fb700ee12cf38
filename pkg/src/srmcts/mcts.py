"""One search trial: PUCT selection, policy expansion, value backup.

The tree's root is the empty expression; edges carry mutations, so the
expression at a node is the replay of the mutations along its root path
and sizes strictly increase with depth. Each expansion draws K mutations
from the policy, evaluates every resulting child on the training data
(optionally refitting constants), assigns solved children the value 1
and all others the critic estimate, and backs up each new child's value
through its ancestors with an exponential depth decay. The tree lives
only for the duration of the trial.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .constopt import DEFAULT_CONSTOPT, ConstOptConfig, optimize_constants
from .expressions import DimensionError, MaybeExpr, Node, evaluate, simplify
from .features import FIT_SAMPLE_ROWS, _INVALID_FIT, compute_fit_stats
from .metrics import r_squared
from .mutations import Mutation, MutationTrace, TraceStep, apply_mutation
from .policy import PolicyExhausted, sample_mutations

NEG_INF = float("-inf")


@dataclass
class SearchNode:
    expr: MaybeExpr
    parent: Optional["SearchNode"]
    edge: Optional[Mutation]
    prior: float
    node_id: int
    children: list = field(default_factory=list)
    n_visits: int = 0
    v_sum: float = 0.0
    train_r2: float = NEG_INF
    solved: bool = False
    terminal: bool = False
    on_solution_path: bool = False
    fitted: Optional[Node] = None
    fit_stats: object = None  # cached features for later expansion

    @property
    def value_estimate(self) -> float:
        return self.v_sum / self.n_visits if self.n_visits > 0 else 0.0


@dataclass(frozen=True)
class TrialRanges:
    """Per-trial hyperparameter sampling ranges."""

    k: tuple[int, int] = (8, 16)
    temperature: tuple[float, float] = (0.5, 1.0)
    depth_penalty: tuple[float, ...] = (0.8, 0.9, 0.95, 1.0)
    p_uct: tuple[float, ...] = (0.5, 1.0, 2.0)
    iterations: int = 1000


@dataclass(frozen=True)
class TrialConfig:
    iterations: int = 1000
    k_range: tuple[int, int] = (8, 16)
    p_uct: float = 1.0
    temperature: float = 1.0
    depth_penalty: float = 1.0
    constant_opt_strategy: Optional[str] = None  # None | never | best_only | all
    solve_threshold: float = 0.99
    evaluation_budget: int = 500_000

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 1 <= self.k_range[0] <= self.k_range[1] <= 64:
            raise ValueError("k_range must lie within [1, 64]")


def sample_trial_config(
    rng: np.random.Generator,
    ranges: TrialRanges = TrialRanges(),
    **overrides,
) -> TrialConfig:
    """Draw one trial configuration from the given ranges.

    K and the decoding temperature are uniform over their ranges; the
    depth penalty and exploration constant are uniform over their
    discrete sets. The drawn K is pinned for the whole trial.
    """
    k = int(rng.integers(ranges.k[0], ranges.k[1] + 1))
    fields = dict(
        iterations=ranges.iterations,
        k_range=(k, k),
        temperature=float(rng.uniform(*ranges.temperature)),
        depth_penalty=float(ranges.depth_penalty[rng.integers(len(ranges.depth_penalty))]),
        p_uct=float(ranges.p_uct[rng.integers(len(ranges.p_uct))]),
    )
    fields.update(overrides)
    return TrialConfig(**fields)


def puct_score(child: SearchNode, sibling_visits: int, p_uct: float) -> float:
    explore = math.sqrt(sibling_visits) / (1.0 + child.n_visits)
    return child.value_estimate + p_uct * explore * child.prior


def select(root: SearchNode, cfg: TrialConfig) -> list[SearchNode]:
    """Root-to-leaf path maximising the PUCT score at every step.

    Ties fall back to the higher prior, then the lower node id.
    """
    path = [root]
    node = root
    while node.children:
        total = sum(c.n_visits for c in node.children)
        node = max(
            node.children,
            key=lambda c: (puct_score(c, total, cfg.p_uct), c.prior, -c.node_id),
        )
        path.append(node)
    return path


def backpropagate(node: SearchNode, value: float, depth_penalty: float) -> None:
    """Add ``value`` at ``node`` and decayed copies at every ancestor."""
    decay = 1.0
    current: Optional[SearchNode] = node
    while current is not None:
        current.n_visits += 1
        current.v_sum += value * decay
        decay *= depth_penalty
        current = current.parent


@dataclass
class TrialResult:
    best_expr: MaybeExpr = None
    best_fitted: MaybeExpr = None
    best_r2: float = NEG_INF
    solved: bool = False
    solved_traces: list[MutationTrace] = field(default_factory=list)
    node_stats: list[tuple[MaybeExpr, int, float, bool]] = field(default_factory=list)
    evaluations: int = 0
    nodes_created: int = 0
    iterations_run: int = 0
    counters: dict = field(default_factory=dict)
    wall_time: float = 0.0
    config: Optional[TrialConfig] = None

    def best_size(self) -> int:
        best = self.best_fitted if self.best_fitted is not None else self.best_expr
        return simplify(best).size if best is not None else 0


def _root_path_trace(node: SearchNode) -> MutationTrace:
    chain = []
    cursor = node
    while cursor.parent is not None:
        chain.append(cursor)
        cursor = cursor.parent
    chain.reverse()
    steps = tuple(TraceStep(n.parent.expr, n.edge) for n in chain)
    return MutationTrace(steps, node.expr)


class _Trial:
    def __init__(self, dataset, policy, critic, cfg, rng, constopt_cfg, log_sink):
        self.dataset = dataset
        self.policy = policy
        self.critic = critic
        self.cfg = cfg
        self.rng = rng
        self.constopt_cfg = constopt_cfg
        self.log_sink = log_sink
        self.strategy = cfg.constant_opt_strategy or "never"
        self.result = TrialResult(config=cfg)
        self.next_id = 0
        self.root = self._new_node(None, None, None, 1.0)
        centered = dataset.y - dataset.y.mean()
        self.sst = float(centered @ centered)
        # fit statistics are only worth computing when someone reads them
        self.need_fit = not getattr(policy, "uniform", False) or getattr(
            critic, "needs_features", True
        )
        self.eval_cache: dict = {}  # shared subtree values on the trial's X

    def _new_node(self, expr, parent, edge, prior) -> SearchNode:
        node = SearchNode(expr, parent, edge, prior, self.next_id)
        self.next_id += 1
        return node

    def _consider_best(self, node: SearchNode) -> None:
        r = self.result
        candidate = node.fitted if node.fitted is not None else node.expr
        if node.train_r2 > r.best_r2:
            better = True
        elif node.train_r2 == r.best_r2 and r.best_expr is not None and candidate is not None:
            better = simplify(candidate).size < simplify(
                r.best_fitted if r.best_fitted is not None else r.best_expr
            ).size
        else:
            better = False
        if better:
            r.best_expr = node.expr
            r.best_fitted = node.fitted
            r.best_r2 = node.train_r2

    def _evaluate_child(self, expr: Node):
        try:
            outcome = evaluate(expr, self.dataset.X, self.eval_cache)
        except DimensionError:
            return NEG_INF, None, _INVALID_FIT
        if outcome.ok:
            residual = self.dataset.y - outcome.values
            sse = float(residual @ residual)
            if self.sst > 0.0:
                r2 = 1.0 - sse / self.sst
            else:
                r2 = 1.0 if sse == 0.0 else NEG_INF
            if self.need_fit:
                rows = np.arange(min(self.dataset.n, FIT_SAMPLE_ROWS))
                fit = compute_fit_stats(
                    self.dataset, expr, rows, predictions=outcome.values[: len(rows)]
                )
            else:
                fit = _INVALID_FIT
        else:
            r2, fit = NEG_INF, _INVALID_FIT
        fitted = None
        if self.strategy == "all" and r2 != NEG_INF:
            try:
                fitted, fitted_r2 = optimize_constants(expr, self.dataset, self.constopt_cfg, self.rng)
                if fitted is not expr:
                    r2 = max(r2, fitted_r2)
            except Exception:
                fitted = None
        return r2, fitted, fit

    def expand(self, leaf: SearchNode, budget_left: int) -> list[tuple[SearchNode, float]]:
        k = int(self.rng.integers(self.cfg.k_range[0], self.cfg.k_range[1] + 1))
        try:
            samples = sample_mutations(
                self.policy, self.dataset, leaf.expr, k, self.cfg.temperature,
                self.rng, stats=self.result.counters, fit=leaf.fit_stats,
            )
        except PolicyExhausted:
            leaf.terminal = True
            return []
        out = []
        for mutation, logp in samples:
            if len(out) >= budget_left:
                break
            child_expr = apply_mutation(leaf.expr, mutation)
            self.result.evaluations += 1
            r2, fitted, fit = self._evaluate_child(child_expr)
            child = self._new_node(child_expr, leaf, mutation, math.exp(logp))
            child.train_r2 = r2
            child.fitted = fitted
            child.fit_stats = fit
            if r2 >= self.cfg.solve_threshold:
                child.solved = True
                value = 1.0
                self._mark_solution(child)
            else:
                value = float(self.critic.value(self.dataset, child_expr, self.rng, fit=fit))
            leaf.children.append(child)
            self.result.nodes_created += 1
            self._consider_best(child)
            out.append((child, value))
        return out

    def _mark_solution(self, node: SearchNode) -> None:
        self.result.solved = True
        self.result.solved_traces.append(_root_path_trace(node))
        cursor: Optional[SearchNode] = node
        while cursor is not None:
            cursor.on_solution_path = True
            cursor = cursor.parent

    def _propagate_terminal(self, node: SearchNode) -> None:
        # a node whose every child is dead can never grow a new expression
        cursor = node.parent
        while cursor is not None and cursor.children and all(c.terminal for c in cursor.children):
            cursor.terminal = True
            cursor = cursor.parent

    def run(self, stop_on_solve: bool) -> TrialResult:
        cfg = self.cfg
        start = time.monotonic()
        for iteration in range(cfg.iterations):
            if self.result.evaluations >= cfg.evaluation_budget:
                break
            if self.root.terminal:
                break  # no leaf can grow any further
            path = select(self.root, cfg)
            leaf = path[-1]
            if leaf.terminal:
                self._propagate_terminal(leaf)
                backpropagate(leaf, 0.0, cfg.depth_penalty)
                self.result.iterations_run += 1
                continue
            expanded = self.expand(leaf, cfg.evaluation_budget - self.result.evaluations)
            if not expanded:
                if leaf.terminal:
                    self._propagate_terminal(leaf)
                backpropagate(leaf, 0.0, cfg.depth_penalty)
            else:
                for child, value in expanded:
                    backpropagate(child, value, cfg.depth_penalty)
            self.result.iterations_run += 1
            if self.log_sink is not None:
                self.log_sink(
                    {
                        "iteration": iteration,
                        "depth": len(path) - 1,
                        "k": len(expanded),
                        "best_r2": self.result.best_r2,
                        "evaluations": self.result.evaluations,
                    }
                )
            if stop_on_solve and self.result.solved:
                break
        self._finalize()
        self.result.wall_time = time.monotonic() - start
        return self.result

    def _finalize(self) -> None:
        result = self.result
        if (
            self.strategy == "best_only"
            and result.best_expr is not None
            and result.best_r2 != NEG_INF
        ):
            try:
                fitted, fitted_r2 = optimize_constants(
                    result.best_expr, self.dataset, self.constopt_cfg, self.rng
                )
                if fitted_r2 >= result.best_r2:
                    result.best_fitted = fitted
                    result.best_r2 = fitted_r2
            except Exception:
                pass
            if result.best_r2 >= self.cfg.solve_threshold and not result.solved:
                result.solved = True
                best_node = self._find_node(result.best_expr)
                if best_node is not None:
                    self._mark_solution(best_node)
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.n_visits > 0:
                result.node_stats.append(
                    (node.expr, node.n_visits, node.value_estimate, node.on_solution_path)
                )
            stack.extend(node.children)

    def _find_node(self, expr: Node) -> Optional[SearchNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.expr is expr:
                return node
            stack.extend(node.children)
        return None


def run_trial(
    dataset,
    policy,
    critic,
    cfg: TrialConfig = TrialConfig(),
    rng: Optional[np.random.Generator] = None,
    constopt_cfg: ConstOptConfig = DEFAULT_CONSTOPT,
    log_sink: Optional[Callable[[dict], None]] = None,
    stop_on_solve: bool = False,
) -> TrialResult:
    """Run one search trial on a training dataset and discard the tree.

    Every new child triggers its own backup, so a K-wide expansion
    performs K backups. One evaluation is one successfully applied and
    fitted mutation; discarded raw samples are counted but cost no
    budget. The best expression maximises training R2 with ties broken
    by smaller simplified size, then earlier discovery.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    trial = _Trial(dataset, policy, critic, cfg, rng, constopt_cfg, log_sink)
    return trial.run(stop_on_solve)

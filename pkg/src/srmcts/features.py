"""Dataset- and node-level feature maps shared by the policy and critic.

The base vector summarises the candidate expression (size, depth,
operator usage, variables touched), its fit on at most 100 sampled rows
(R-squared, residual moments, residual/feature correlations) and the
dataset itself (dimension, target moments, target/feature correlations).
Invalid evaluations zero out the fit block and clear the validity flag.

Per-node features extend this with position, subtree shape and the
unary-nesting context needed to score anchors and operators.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .expressions import (
    BINARY_KINDS,
    OPERATOR_KINDS,
    UNARY_KINDS,
    BinaryOp,
    Constant,
    MaybeExpr,
    Node,
    UnaryOp,
    Variable,
    evaluate,
)
from .metrics import r_squared

MAX_VARS = 10
N_KINDS = len(OPERATOR_KINDS)  # 12
FIT_SAMPLE_ROWS = 100

# Base layout: bias, size, depth, empty flag, 12 kind counts, 10 variable
# flags, constant count, then the fit block and dataset block.
BASE_DIM = 4 + N_KINDS + MAX_VARS + 1 + 4 + MAX_VARS + 4 + MAX_VARS
NODE_DIM = 9 + N_KINDS + 2


@dataclass(frozen=True)
class FitStats:
    valid: bool
    r2: float
    residual_mean: float
    residual_std: float
    residual_corr: np.ndarray  # (MAX_VARS,), zero beyond d or when invalid
    rows: Optional[np.ndarray] = None  # the subsample the statistics used
    residual: Optional[np.ndarray] = None  # y - prediction on those rows


_INVALID_FIT = FitStats(False, 0.0, 0.0, 0.0, np.zeros(MAX_VARS))


def subsample_rows(n: int, rng: np.random.Generator) -> np.ndarray:
    """Row subset used for fit statistics: everything up to 100 rows."""
    if n <= FIT_SAMPLE_ROWS:
        return np.arange(n)
    return np.sort(rng.choice(n, FIT_SAMPLE_ROWS, replace=False))


def compute_fit_stats(
    dataset,
    expr: MaybeExpr,
    rows: np.ndarray,
    predictions: Optional[np.ndarray] = None,
) -> FitStats:
    """Residual statistics of ``expr`` on the given rows.

    ``predictions`` may carry an already computed prediction vector for
    exactly those rows, saving one tree evaluation.
    """
    if expr is None:
        return _INVALID_FIT
    X = dataset.X[rows]
    y = dataset.y[rows]
    if predictions is None:
        outcome = evaluate(expr, X)
        if not outcome.ok:
            return _INVALID_FIT
        predictions = outcome.values
    residual = y - predictions
    r2 = r_squared(y, predictions)
    if r2 == float("-inf"):
        return _INVALID_FIT
    res_mean = float(residual.mean())
    res_std = float(residual.std())
    corr = np.zeros(MAX_VARS)
    if res_std > 0:
        centered = (residual - res_mean) / (res_std * len(rows))
        col_means = X.mean(axis=0)
        col_stds = X.std(axis=0)
        raw = (X - col_means).T @ centered
        safe = col_stds > 0
        corr[: dataset.d][safe] = raw[safe] / col_stds[safe]
    return FitStats(True, r2, res_mean, res_std, corr, rows, residual)


def expression_counts(expr: MaybeExpr) -> tuple[np.ndarray, np.ndarray, int]:
    """Kind counts, variable flags and constant count (cached per tree).

    The same expression is usually summarised several times (critic
    value at creation, policy context at expansion), so results are
    memoised on the structural hash. Callers must not mutate the arrays.
    """
    if expr is None:
        return np.zeros(N_KINDS), np.zeros(MAX_VARS), 0
    return _expression_counts_cached(expr)


@lru_cache(maxsize=65536)
def _expression_counts_cached(expr: Node) -> tuple[np.ndarray, np.ndarray, int]:
    kinds = np.zeros(N_KINDS)
    var_flags = np.zeros(MAX_VARS)
    n_const = 0
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Variable):
            var_flags[node.index] = 1.0
        elif isinstance(node, Constant):
            n_const += 1
        elif isinstance(node, UnaryOp):
            kinds[4 + UNARY_KINDS.index(node.kind)] += 1
            stack.append(node.child)
        else:
            kinds[BINARY_KINDS.index(node.kind)] += 1
            stack.append(node.left)
            stack.append(node.right)
    kinds.setflags(write=False)
    var_flags.setflags(write=False)
    return kinds, var_flags, n_const


def base_features(dataset, expr: MaybeExpr, fit: FitStats) -> np.ndarray:
    y_mean, y_std, y_corr = dataset.stats()
    kinds, var_flags, n_const = expression_counts(expr)
    scale = y_std + 1e-9
    out = np.empty(BASE_DIM)
    out[0] = 1.0
    out[1] = (expr.size if expr is not None else 0) / 60.0
    out[2] = (expr.height if expr is not None else 0) / 12.0
    out[3] = 1.0 if expr is None else 0.0
    out[4:16] = kinds / 8.0
    out[16:26] = var_flags
    out[26] = n_const / 8.0
    out[27] = 1.0 if fit.valid else 0.0
    out[28] = np.clip(fit.r2, -1.0, 1.0) if fit.valid else 0.0
    out[29] = np.clip(fit.residual_mean / scale, -3.0, 3.0) / 3.0 if fit.valid else 0.0
    out[30] = np.clip(fit.residual_std / scale, 0.0, 3.0) / 3.0 if fit.valid else 0.0
    out[31:41] = fit.residual_corr
    out[41] = dataset.d / 10.0
    out[42] = y_mean / (1.0 + abs(y_mean))
    out[43] = y_std / (1.0 + y_std)
    out[44:54] = y_corr
    out[54] = min(dataset.n, 1000) / 1000.0
    return out


def featurize(dataset, expr: MaybeExpr, rng: np.random.Generator) -> np.ndarray:
    """Fixed-length feature vector; deterministic given the subsample seed."""
    rows = subsample_rows(dataset.n, rng)
    return base_features(dataset, expr, compute_fit_stats(dataset, expr, rows))


# Basis transforms probed against the residual, in row order; row 0 is the
# raw linear correlation.
PROBE_BASES = ("linear", "square", "sqrt", "inv", "cos", "sin", "exp", "log", "tan")
N_PROBES = len(PROBE_BASES)
UNARY_PROBE_ROW = {"cos": 4, "sin": 5, "tan": 8, "exp": 6, "log": 7, "sqrt": 2, "inv": 3, "square": 1}


def residual_probes(dataset, rows: np.ndarray, residual: Optional[np.ndarray]) -> np.ndarray:
    """|corr(residual, basis(x_j))| per basis and variable, (N_PROBES, 10).

    The transforms are feature probes, not evaluation semantics: domains
    are guarded (absolute values, clipping) so every column is defined.
    A zero matrix is returned for invalid or constant residuals.
    """
    out = np.zeros((N_PROBES, MAX_VARS))
    if residual is None:
        return out
    res_std = residual.std()
    if res_std == 0 or not np.isfinite(res_std):
        return out
    res = (residual - residual.mean()) / (res_std * len(rows))
    X = dataset.X[rows]
    absx = np.abs(X)
    safe = np.where(absx < 1e-3, 1e-3, absx) * np.sign(np.where(X == 0, 1.0, X))
    bases = np.stack(
        (
            X,
            X * X,
            np.sqrt(absx),
            1.0 / safe,
            np.cos(X),
            np.sin(X),
            np.exp(np.clip(X, -20.0, 20.0)),
            np.log(absx + 1e-9),
            np.clip(np.tan(X), -50.0, 50.0),
        )
    )  # (N_PROBES, rows, d)
    stds = bases.std(axis=1)
    centered = bases - bases.mean(axis=1, keepdims=True)
    raw = np.einsum("brd,r->bd", centered, res)
    ok = stds > 1e-12
    block = out[:, : dataset.d]
    block[ok] = np.abs(raw[ok]) / stds[ok]
    return out


def node_features(expr: Node, fit: FitStats) -> np.ndarray:
    """(size, NODE_DIM) matrix over the pre-order nodes of ``expr``.

    Columns: bias, node depth, subtree size, pre-order position, leaf
    flag, root flag, subtree-has-unary, has-unary-ancestor, constant
    flag, kind one-hot, and two tied per-variable signals (residual and
    plain correlation slots use the residual correlations of that node's
    variable; zero elsewhere).
    """
    n = expr.size
    out = np.zeros((n, NODE_DIM))
    stack: list[tuple[Node, int, bool]] = [(expr, 1, False)]
    pos = 0
    while stack:
        node, depth, under_unary = stack.pop()
        row = out[pos]
        row[0] = 1.0
        row[1] = depth / 12.0
        row[2] = node.size / 60.0
        row[3] = (pos + 1) / n
        row[4] = 1.0 if node.size == 1 else 0.0
        row[5] = 1.0 if pos == 0 else 0.0
        row[6] = 1.0 if node.has_unary else 0.0
        row[7] = 1.0 if under_unary else 0.0
        if isinstance(node, Constant):
            row[8] = 1.0
        elif isinstance(node, Variable):
            row[9 + N_KINDS] = fit.residual_corr[node.index]
            row[9 + N_KINDS + 1] = abs(fit.residual_corr[node.index])
        elif isinstance(node, UnaryOp):
            row[9 + 4 + UNARY_KINDS.index(node.kind)] = 1.0
        else:
            row[9 + BINARY_KINDS.index(node.kind)] = 1.0
        pos += 1
        if isinstance(node, UnaryOp):
            stack.append((node.child, depth + 1, True))
        elif isinstance(node, BinaryOp):
            stack.append((node.right, depth + 1, under_unary))
            stack.append((node.left, depth + 1, under_unary))
    return out

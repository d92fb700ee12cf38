"""Fitting the numeric constants of a candidate expression to data.

A quasi-Newton (BFGS) minimisation of the mean squared error over a
bounded row subsample, with central-difference gradients. Invalid
evaluations at a trial point count as an infinite objective so the line
search backs away from them. The best constants seen are always
returned, so the fit never degrades the starting point on the
optimisation batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .expressions import Constant, Node, evaluate, iter_preorder, replace_node
from .metrics import r_squared

R2_IMPROVEMENT_TOL = 1e-6  # minimum R2 gain that resets patience


class OptimizationSkipped(RuntimeError):
    """The starting point is not evaluable on the optimisation batch."""


@dataclass(frozen=True)
class ConstOptConfig:
    batch_size: int = 256
    patience: int = 10
    timeout: float = 1.0
    max_iterations: int = 200

    def __post_init__(self):
        if min(self.batch_size, self.patience, self.max_iterations) <= 0 or self.timeout <= 0:
            raise ValueError("all constant-optimisation settings must be positive")


DEFAULT_CONSTOPT = ConstOptConfig()


def extract_constants(expr: Node) -> tuple[tuple[int, ...], np.ndarray]:
    """Pre-order positions of constant nodes and their current values."""
    indices = []
    values = []
    for position, node in enumerate(iter_preorder(expr), start=1):
        if isinstance(node, Constant):
            indices.append(position)
            values.append(node.value)
    return tuple(indices), np.array(values, dtype=float)


def substitute_constants(expr: Node, indices: tuple[int, ...], values: np.ndarray) -> Node:
    out = expr
    for position, value in zip(indices, values):
        out = replace_node(out, position, Constant(float(value)))
    return out


def optimize_constants(
    expr: Node,
    dataset,
    cfg: ConstOptConfig = DEFAULT_CONSTOPT,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Node, float]:
    """Fit the constants of ``expr`` to ``dataset``; returns (expression, R2).

    The returned R2 is measured on the full provided data. Expressions
    without constants are returned unchanged. Stops on ``patience``
    non-improving iterations, ``max_iterations``, or ``timeout`` seconds.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    indices, start = extract_constants(expr)
    if len(indices) == 0:
        return expr, r_squared(dataset.y, evaluate(expr, dataset.X))

    n = dataset.n
    if n > cfg.batch_size:
        rows = np.sort(rng.choice(n, cfg.batch_size, replace=False))
        Xb, yb = dataset.X[rows], dataset.y[rows]
    else:
        Xb, yb = dataset.X, dataset.y
    y_var = float(np.var(yb))

    def objective(c: np.ndarray) -> float:
        outcome = evaluate(substitute_constants(expr, indices, c), Xb)
        if not outcome.ok:
            return np.inf
        r = outcome.values - yb
        return float(r @ r) / len(yb)

    def gradient(c: np.ndarray) -> Optional[np.ndarray]:
        g = np.empty_like(c)
        for i in range(len(c)):
            h = 1e-5 * (1.0 + abs(c[i]))
            up, down = c.copy(), c.copy()
            up[i] += h
            down[i] -= h
            f_up, f_down = objective(up), objective(down)
            if not (np.isfinite(f_up) and np.isfinite(f_down)):
                return None
            g[i] = (f_up - f_down) / (2.0 * h)
        return g

    def as_r2(mse: float) -> float:
        if not np.isfinite(mse):
            return float("-inf")
        if y_var == 0.0:
            return 1.0 if mse == 0.0 else float("-inf")
        return 1.0 - mse / y_var

    deadline = time.monotonic() + cfg.timeout
    c = start.copy()
    f = objective(c)
    if not np.isfinite(f):
        raise OptimizationSkipped("initial constants are not evaluable on the batch")
    best_c, best_r2 = c.copy(), as_r2(f)

    k = len(c)
    H = np.eye(k)
    g = gradient(c)
    stall = 0
    if g is not None:
        for _ in range(cfg.max_iterations):
            if time.monotonic() > deadline:
                break
            direction = -H @ g
            if direction @ g >= 0.0:  # lost curvature, restart from steepest descent
                H = np.eye(k)
                direction = -g
            # Armijo backtracking; infinite objectives simply fail the test
            step, accepted = 1.0, None
            slope = float(g @ direction)
            for _ in range(30):
                trial = c + step * direction
                f_trial = objective(trial)
                if np.isfinite(f_trial) and f_trial <= f + 1e-4 * step * slope:
                    accepted = (trial, f_trial)
                    break
                step *= 0.5
            if accepted is None:
                break
            c_new, f_new = accepted
            g_new = gradient(c_new)
            if g_new is None:
                c, f = c_new, f_new
                if as_r2(f) > best_r2:
                    best_c, best_r2 = c.copy(), as_r2(f)
                break
            s = c_new - c
            yk = g_new - g
            sy = float(s @ yk)
            if sy > 1e-12:
                rho = 1.0 / sy
                I = np.eye(k)
                H = (I - rho * np.outer(s, yk)) @ H @ (I - rho * np.outer(yk, s)) + rho * np.outer(s, s)
            c, f, g = c_new, f_new, g_new
            r2 = as_r2(f)
            if r2 > best_r2 + R2_IMPROVEMENT_TOL:
                best_c, best_r2, stall = c.copy(), r2, 0
            else:
                if r2 > best_r2:
                    best_c, best_r2 = c.copy(), r2
                stall += 1
                if stall >= cfg.patience:
                    break
            if float(np.max(np.abs(g))) < 1e-12:
                break

    fitted = substitute_constants(expr, indices, best_c)
    return fitted, r_squared(dataset.y, evaluate(fitted, dataset.X))

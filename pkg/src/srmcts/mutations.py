"""Growth mutations on expression trees and trace construction.

A mutation is a triplet (anchor, op, arg): the node at pre-order position
``anchor`` is replaced by an operator applied to it, optionally combined
with a freshly supplied argument subtree. Every mutation strictly grows
the expression; the only way to start from nothing is ``root_replace``,
which installs the argument as the whole tree.

`dismantle` runs the process in reverse: it deletes one operator node at
a time from a target expression (together with one child subtree when the
operator is binary) and records, in reverse order, the mutations that
rebuild the target from the empty expression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .expressions import (
    BINARY_KINDS,
    DEFAULT_CONSTRAINTS,
    UNARY_KINDS,
    BinaryOp,
    ConstraintConfig,
    MaybeExpr,
    Node,
    UnaryOp,
    check_constraints,
    node_at,
    replace_node,
    size,
)

# Unary wraps replace A by op(A). Binary ops come in two variants fixing
# on which side the new argument B lands: "<kind>_right" builds (A kind B),
# "<kind>_left" builds (B kind A). root_replace installs B as the tree.
WRAP_OPS = tuple(f"wrap_{k}" for k in UNARY_KINDS)
BINARY_MUTATION_OPS = tuple(f"{k}_{side}" for k in BINARY_KINDS for side in ("right", "left"))
ROOT_REPLACE = "root_replace"
MUTATION_OPS = WRAP_OPS + BINARY_MUTATION_OPS + (ROOT_REPLACE,)

GOAL_SINGLE_STEP = math.inf  # dismantling preset: one root_replace per target


class InvalidMutation(ValueError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"invalid mutation: {reason}")


class ConstraintViolation(ValueError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"mutation result violates constraints: {kind}")


@dataclass(frozen=True)
class Mutation:
    anchor: int
    op: str
    arg: Optional[Node] = None


@dataclass(frozen=True)
class TraceStep:
    state: MaybeExpr  # expression before the mutation (None at the start)
    mutation: Mutation


@dataclass(frozen=True)
class MutationTrace:
    steps: tuple[TraceStep, ...]
    target: Node


def requires_arg(op: str) -> bool:
    return op == ROOT_REPLACE or op in BINARY_MUTATION_OPS


def validate_mutation(expr: MaybeExpr, m: Mutation) -> Optional[str]:
    """``None`` when applicable, else a reason string.

    Rejected: unknown operators, out-of-range anchors, a missing or
    superfluous argument, root_replace on a non-empty expression, and any
    other operator on the empty expression.
    """
    if m.op not in MUTATION_OPS:
        return "unknown_op"
    if expr is None:
        if m.op != ROOT_REPLACE:
            return "empty_requires_root_replace"
    elif m.op == ROOT_REPLACE:
        return "root_replace_requires_empty"
    elif not 1 <= m.anchor <= expr.size:
        return "bad_index"
    if requires_arg(m.op):
        if m.arg is None:
            return "missing_arg"
    elif m.arg is not None:
        return "extra_arg"
    return None


def apply_mutation(
    expr: MaybeExpr, m: Mutation, cfg: ConstraintConfig = DEFAULT_CONSTRAINTS
) -> Node:
    """Apply a validated mutation; the result must satisfy ``cfg``.

    Raises :class:`InvalidMutation` when validation fails and
    :class:`ConstraintViolation` when the grown expression breaks the
    size or nesting limits.
    """
    reason = validate_mutation(expr, m)
    if reason is not None:
        raise InvalidMutation(reason)
    if m.op == ROOT_REPLACE:
        result = m.arg
    else:
        anchor_node = node_at(expr, m.anchor)
        if m.op in WRAP_OPS:
            grown: Node = UnaryOp(m.op[len("wrap_"):], anchor_node)
        else:
            kind, side = m.op.rsplit("_", 1)
            if side == "right":
                grown = BinaryOp(kind, anchor_node, m.arg)
            else:
                grown = BinaryOp(kind, m.arg, anchor_node)
        result = replace_node(expr, m.anchor, grown)
    violation = check_constraints(result, cfg)
    if violation is not None:
        raise ConstraintViolation(violation.kind)
    return result


def replay(trace: MutationTrace) -> Node:
    """Fold the trace's mutations from the empty expression."""
    state: MaybeExpr = None
    for step in trace.steps:
        state = apply_mutation(state, step.mutation)
    assert state is not None
    return state


# ---------------------------------------------------------------------------
# Dismantling
# ---------------------------------------------------------------------------

def _removal_candidates(expr: Node) -> list[tuple[int, Optional[int], int]]:
    """All single-node removals as (pre-order index, removed child slot, B size).

    For a unary node the slot is None and the argument size is 0; for a
    binary node slot 0 removes the left child (the right one survives)
    and slot 1 removes the right child.
    """
    out = []
    index = 0
    for node in _preorder(expr):
        index += 1
        if isinstance(node, UnaryOp):
            out.append((index, None, 0))
        elif isinstance(node, BinaryOp):
            out.append((index, 0, node.left.size))
            out.append((index, 1, node.right.size))
    return out


def _preorder(expr: Node):
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def dismantle(
    target: Node,
    mutation_size_goal: Union[int, float],
    rng: np.random.Generator,
) -> MutationTrace:
    """Random reverse construction of ``target`` as a mutation trace.

    At each step one operator node is removed (for a binary operator also
    the subtree rooted at one of its children, which becomes the recorded
    argument B). Candidate removals must offer an argument of size at
    least ``min(goal, best available)``; among those, a removal with the
    smallest qualifying argument is picked uniformly at random, so
    argument sizes track the goal instead of merely exceeding it. Once
    the remainder is smaller than the goal (or is a single leaf) the
    final recorded step is a root_replace of the remainder. Replaying the
    returned trace reconstructs ``target`` exactly.
    """
    if target is None:
        raise ValueError("cannot dismantle the empty expression")
    backward: list[Mutation] = []
    current = target
    while current.size >= mutation_size_goal:
        candidates = _removal_candidates(current)
        if not candidates:
            break  # single leaf left
        best_available = max(c[2] for c in candidates)
        threshold = min(mutation_size_goal, best_available)
        qualifying = [c for c in candidates if c[2] >= threshold]
        smallest = min(c[2] for c in qualifying)
        tier = [c for c in qualifying if c[2] == smallest]
        tier_nodes = sorted({c[0] for c in tier})
        picked_index = tier_nodes[rng.integers(len(tier_nodes))]
        slots = [c[1] for c in tier if c[0] == picked_index]
        slot = slots[rng.integers(len(slots))] if len(slots) > 1 else slots[0]

        removed = node_at(current, picked_index)
        if isinstance(removed, UnaryOp):
            survivor = removed.child
            backward.append(Mutation(picked_index, f"wrap_{removed.kind}"))
        else:
            assert isinstance(removed, BinaryOp) and slot is not None
            if slot == 1:  # right child removed, so forward puts B on the right
                survivor, arg = removed.left, removed.right
                backward.append(Mutation(picked_index, f"{removed.kind}_right", arg))
            else:
                survivor, arg = removed.right, removed.left
                backward.append(Mutation(picked_index, f"{removed.kind}_left", arg))
        current = replace_node(current, picked_index, survivor)

    forward = [Mutation(0, ROOT_REPLACE, current)] + backward[::-1]
    steps = []
    state: MaybeExpr = None
    for m in forward:
        steps.append(TraceStep(state, m))
        state = apply_mutation(state, m)
    return MutationTrace(tuple(steps), state)

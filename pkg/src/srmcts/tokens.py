"""Token formats for states (expression + dataset) and mutation actions.

Floats are encoded as three tokens: a sign, a mantissa with four
significant digits (0..9999) and a power-of-ten exponent token between
``E-100`` and ``E100``. Expressions are written in prefix (Polish) order.
A state is the expression walk, a separator, then the flattened
``(x_i, y_i)`` rows of the dataset (at most 100 of them). An action is
the anchor index, the operator name and, when present, the prefix walk
of the argument subtree, with separators in between.

Action tokens default to exact decimal constants so that traces written
to disk replay losslessly; pass ``float_triplets=True`` to stay inside
the finite vocabulary required by an external sequence model.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .expressions import (
    BINARY_KINDS,
    UNARY_KINDS,
    Constant,
    MaybeExpr,
    Node,
    iter_preorder,
    parse_prefix,
)
from .mutations import MUTATION_OPS, ROOT_REPLACE, Mutation, requires_arg

SEPARATOR = "|"
EMPTY_EXPR_TOKEN = "nil"
MANTISSA_MAX = 9999
EXPONENT_MIN, EXPONENT_MAX = -100, 100
STATE_MAX_POINTS = 100


class TokenOverflowError(ValueError):
    """Raised when a float's exponent falls outside the token range."""


def encode_float(value: float) -> list[str]:
    """Sign/mantissa/exponent triplet at four significant digits.

    Zero encodes as ``["+", "0", "E0"]``.
    """
    value = float(value)
    if value == 0.0:
        return ["+", "0", "E0"]
    if not np.isfinite(value):
        raise ValueError(f"cannot tokenize non-finite value {value}")
    digits, _, exp_str = f"{abs(value):.3e}".partition("e")
    mantissa = int(digits.replace(".", ""))
    exponent = int(exp_str) - 3
    if not EXPONENT_MIN <= exponent <= EXPONENT_MAX:
        raise TokenOverflowError(f"exponent {exponent} outside [{EXPONENT_MIN}, {EXPONENT_MAX}]")
    sign = "+" if value > 0 else "-"
    return [sign, str(mantissa), f"E{exponent}"]


def decode_float(tokens: Sequence[str]) -> float:
    sign, mantissa, exponent = tokens
    if sign not in ("+", "-") or not exponent.startswith("E"):
        raise ValueError(f"malformed float triplet {tokens!r}")
    value = float(f"{int(mantissa)}e{int(exponent[1:])}")
    return value if sign == "+" else -value


def tokenize_expression(expr: MaybeExpr, float_triplets: bool = True) -> list[str]:
    """Prefix walk of the expression; the empty expression is one token."""
    if expr is None:
        return [EMPTY_EXPR_TOKEN]
    out: list[str] = []
    for node in iter_preorder(expr):
        if isinstance(node, Constant):
            if float_triplets:
                out.extend(encode_float(node.value))
            else:
                out.append(repr(node.value))
        elif node.children:
            out.append(node.kind)  # type: ignore[attr-defined]
        else:
            out.append(f"x{node.index}")  # type: ignore[attr-defined]
    return out


def tokenize_state(dataset, expr: MaybeExpr) -> list[str]:
    """Expression tokens, a separator, then up to 100 flattened data rows."""
    out = tokenize_expression(expr, float_triplets=True)
    out.append(SEPARATOR)
    n = min(dataset.X.shape[0], STATE_MAX_POINTS)
    for i in range(n):
        for value in dataset.X[i]:
            out.extend(encode_float(float(value)))
        out.extend(encode_float(float(dataset.y[i])))
    return out


def tokenize_action(m: Mutation, float_triplets: bool = False) -> list[str]:
    """``[anchor, "|", op]`` plus ``["|", *arg prefix]`` when an argument exists."""
    out = [str(m.anchor), SEPARATOR, m.op]
    if m.arg is not None:
        out.append(SEPARATOR)
        out.extend(tokenize_expression(m.arg, float_triplets=float_triplets))
    return out


def parse_action(tokens: Sequence[str]) -> Mutation:
    """Inverse of :func:`tokenize_action` (either constant style)."""
    if len(tokens) < 3 or tokens[1] != SEPARATOR:
        raise ValueError(f"malformed action tokens {tokens!r}")
    anchor = int(tokens[0])
    op = tokens[2]
    if op not in MUTATION_OPS:
        raise ValueError(f"unknown mutation operator {op!r}")
    arg: Optional[Node] = None
    if len(tokens) > 3:
        if tokens[3] != SEPARATOR:
            raise ValueError("expected separator before the argument")
        arg = _parse_maybe_triplets(tokens[4:])
    if requires_arg(op) and arg is None:
        raise ValueError(f"operator {op} requires an argument")
    return Mutation(anchor, op, arg)


def _parse_maybe_triplets(tokens: Sequence[str]) -> Node:
    return parse_prefix(list(tokens))


def vocabulary() -> list[str]:
    """The finite token vocabulary, in stable id order."""
    vocab = [EMPTY_EXPR_TOKEN, SEPARATOR, "+", "-"]
    vocab.extend(BINARY_KINDS)
    vocab.extend(UNARY_KINDS)
    vocab.extend(f"x{i}" for i in range(10))
    vocab.extend(op for op in MUTATION_OPS)
    vocab.extend(str(i) for i in range(MANTISSA_MAX + 1))
    vocab.extend(f"E{e}" for e in range(EXPONENT_MIN, EXPONENT_MAX + 1))
    return vocab


def write_vocab(path) -> int:
    """Write one token per line; line number (0-based) is the token id."""
    tokens = vocabulary()
    with open(path, "w", encoding="utf-8") as fh:
        for token in tokens:
            fh.write(token + "\n")
    return len(tokens)

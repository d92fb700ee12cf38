"""Expression trees over a fixed operator vocabulary.

Trees are immutable. Every node caches its subtree size, height and
unary-nesting status at construction time, so constraint checks and
pre-order indexed access stay cheap even when trees are rebuilt along a
mutation path. Numeric evaluation is total: domain errors, overflow and
non-finite intermediates are reported through :class:`EvalOutcome`
instead of exceptions.

Conventions:
  * the empty expression is represented by ``None``,
  * pre-order node indices are 1-based (the root is node 1),
  * variables are ``x0 .. x9`` (at most ten input features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

BINARY_KINDS = ("add", "sub", "mul", "div")
UNARY_KINDS = ("cos", "sin", "tan", "exp", "log", "sqrt", "inv", "square")
OPERATOR_KINDS = BINARY_KINDS + UNARY_KINDS

MAX_VARIABLES = 10
OVERFLOW_LIMIT = 1e30


class ParseError(ValueError):
    """Raised when a prefix token sequence is not a well-formed expression."""

    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"parse error at token {position}: {reason}")


class DimensionError(ValueError):
    """Raised when an expression references a variable the input lacks."""


@dataclass(frozen=True)
class Node:
    """Base class of expression tree nodes.

    Subclasses populate the cached structural metadata in
    ``__post_init__``; the fields are excluded from equality and hashing,
    which remain purely structural.
    """

    size: int = field(init=False, repr=False, compare=False)
    height: int = field(init=False, repr=False, compare=False)
    has_unary: bool = field(init=False, repr=False, compare=False)
    nesting_ok: bool = field(init=False, repr=False, compare=False)
    max_var: int = field(init=False, repr=False, compare=False)  # -1 when no variable
    shash: int = field(init=False, repr=False, compare=False)  # cached structural hash

    def _meta(self, size: int, height: int, has_unary: bool, nesting_ok: bool, max_var: int,
              shash: int) -> None:
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "has_unary", has_unary)
        object.__setattr__(self, "nesting_ok", nesting_ok)
        object.__setattr__(self, "max_var", max_var)
        object.__setattr__(self, "shash", shash)

    def __hash__(self) -> int:
        return self.shash

    @property
    def children(self) -> tuple["Node", ...]:
        return ()


@dataclass(frozen=True)
class Variable(Node):
    index: int = 0

    def __post_init__(self):
        if not 0 <= self.index < MAX_VARIABLES:
            raise ValueError(f"variable index {self.index} outside [0, {MAX_VARIABLES})")
        self._meta(1, 1, False, True, self.index, hash(("x", self.index)))


@dataclass(frozen=True)
class Constant(Node):
    value: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"constant must be finite, got {self.value}")
        self._meta(1, 1, False, True, -1, hash(("c", self.value)))


@dataclass(frozen=True)
class UnaryOp(Node):
    kind: str = "cos"
    child: Node = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in UNARY_KINDS:
            raise ValueError(f"unknown unary kind {self.kind!r}")
        c = self.child
        self._meta(1 + c.size, 1 + c.height, True, c.nesting_ok and not c.has_unary, c.max_var,
                   hash((self.kind, c.shash)))

    @property
    def children(self) -> tuple[Node, ...]:
        return (self.child,)


@dataclass(frozen=True)
class BinaryOp(Node):
    kind: str = "add"
    left: Node = None  # type: ignore[assignment]
    right: Node = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in BINARY_KINDS:
            raise ValueError(f"unknown binary kind {self.kind!r}")
        l, r = self.left, self.right
        self._meta(
            1 + l.size + r.size,
            1 + max(l.height, r.height),
            l.has_unary or r.has_unary,
            l.nesting_ok and r.nesting_ok,
            max(l.max_var, r.max_var),
            hash((self.kind, l.shash, r.shash)),
        )

    @property
    def children(self) -> tuple[Node, ...]:
        return (self.left, self.right)


for _node_cls in (Variable, Constant, UnaryOp, BinaryOp):
    _node_cls.__hash__ = Node.__hash__  # dataclass regenerates __hash__; use the cached one


Expr = Node  # an expression is identified with its root node
MaybeExpr = Optional[Node]  # None stands for the empty expression


@dataclass(frozen=True)
class ConstraintConfig:
    """Structural limits applied to every expression the search may hold."""

    max_operators: int = 60
    forbid_unary_nesting: bool = True

    def __post_init__(self):
        if self.max_operators <= 0:
            raise ValueError("max_operators must be positive")


DEFAULT_CONSTRAINTS = ConstraintConfig()


@dataclass(frozen=True)
class Violation:
    kind: str  # "too_large" | "nesting"


@dataclass(frozen=True)
class EvalOutcome:
    """Either a finite prediction vector or an invalidity marker."""

    values: Optional[np.ndarray]
    reason: Optional[str] = None  # "domain_error" | "overflow" | "non_finite"

    @property
    def ok(self) -> bool:
        return self.values is not None


# ---------------------------------------------------------------------------
# Structural queries
# ---------------------------------------------------------------------------

def size(expr: MaybeExpr) -> int:
    """Total node count (operators, variables and constants); 0 when empty."""
    return 0 if expr is None else expr.size


def iter_preorder(expr: Node) -> Iterator[Node]:
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def node_at(expr: Node, index: int) -> Node:
    """Node at 1-based pre-order position ``index``."""
    if expr is None or not 1 <= index <= expr.size:
        raise IndexError(f"node index {index} outside [1, {size(expr)}]")
    node = expr
    offset = index - 1  # 0-based offset inside the current subtree
    while offset > 0:
        offset -= 1
        for child in node.children:
            if offset < child.size:
                node = child
                break
            offset -= child.size
    return node


def replace_node(expr: Node, index: int, replacement: Node) -> Node:
    """New tree with the node at pre-order ``index`` swapped for ``replacement``.

    Only the spine from the root to the target is rebuilt; all other
    subtrees are shared with the input.
    """
    if not 1 <= index <= expr.size:
        raise IndexError(f"node index {index} outside [1, {expr.size}]")

    def rebuild(node: Node, offset: int) -> Node:
        if offset == 0:
            return replacement
        offset -= 1
        if isinstance(node, UnaryOp):
            return UnaryOp(node.kind, rebuild(node.child, offset))
        assert isinstance(node, BinaryOp)
        if offset < node.left.size:
            return BinaryOp(node.kind, rebuild(node.left, offset), node.right)
        return BinaryOp(node.kind, node.left, rebuild(node.right, offset - node.left.size))

    return rebuild(expr, index - 1)


def variables_used(expr: MaybeExpr) -> set[int]:
    if expr is None:
        return set()
    return {n.index for n in iter_preorder(expr) if isinstance(n, Variable)}


def check_constraints(expr: Node, cfg: ConstraintConfig = DEFAULT_CONSTRAINTS) -> Optional[Violation]:
    """``None`` when the expression is admissible, else the first violation.

    Size is checked before nesting. The nesting rule forbids any unary
    operator from containing another unary operator anywhere in its
    subtree; the four arithmetic binary operators may appear anywhere.
    """
    if expr.size > cfg.max_operators:
        return Violation("too_large")
    if cfg.forbid_unary_nesting and not expr.nesting_ok:
        return Violation("nesting")
    return None


# ---------------------------------------------------------------------------
# Prefix (Polish) text format
# ---------------------------------------------------------------------------

def parse_prefix(tokens: Union[str, Sequence[str]]) -> Node:
    """Parse a prefix token walk into a tree.

    Constants may appear either as a single decimal token (``"6.67"``) or
    as a sign/mantissa/exponent triplet (``"+", "6670", "E-3"``).
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError(pos, "truncated")
        tok = tokens[pos]
        pos += 1
        return tok

    def parse_node() -> Node:
        start = pos
        tok = take()
        if tok in BINARY_KINDS:
            left = parse_node()
            return BinaryOp(tok, left, parse_node())
        if tok in UNARY_KINDS:
            return UnaryOp(tok, parse_node())
        if len(tok) >= 2 and tok[0] == "x" and tok[1:].isdigit():
            index = int(tok[1:])
            if index >= MAX_VARIABLES:
                raise ParseError(start, f"variable index {index} out of range")
            return Variable(index)
        if tok in ("+", "-"):
            mantissa = take()
            exponent = take()
            try:
                value = _decode_triplet(tok, mantissa, exponent)
            except ValueError:
                raise ParseError(start, "bad constant triplet") from None
            return Constant(value)
        try:
            value = float(tok)
        except ValueError:
            raise ParseError(start, f"unknown token {tok!r}") from None
        if not math.isfinite(value):
            raise ParseError(start, "non-finite constant")
        return Constant(value)

    root = parse_node()
    if pos != len(tokens):
        raise ParseError(pos, "excess tokens")
    return root


def _decode_triplet(sign: str, mantissa: str, exponent: str) -> float:
    if not mantissa.isdigit() or not exponent.startswith("E"):
        raise ValueError("malformed triplet")
    m = int(mantissa)
    e = int(exponent[1:])
    if not 0 <= m <= 9999 or not -100 <= e <= 100:
        raise ValueError("triplet out of range")
    value = float(f"{m}e{e}")
    return value if sign == "+" else -value


def to_prefix(expr: Node) -> list[str]:
    """Pre-order token walk; constants as exact shortest decimals."""
    out: list[str] = []
    for node in iter_preorder(expr):
        if isinstance(node, BinaryOp) or isinstance(node, UnaryOp):
            out.append(node.kind)
        elif isinstance(node, Variable):
            out.append(f"x{node.index}")
        else:
            assert isinstance(node, Constant)
            out.append(repr(node.value))
    return out


_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def to_infix(expr: MaybeExpr) -> str:
    """Human-readable rendering, fully parenthesised."""
    if expr is None:
        return "<empty>"
    if isinstance(expr, Variable):
        return f"x{expr.index}"
    if isinstance(expr, Constant):
        return f"{expr.value:.6g}"
    if isinstance(expr, UnaryOp):
        if expr.kind == "inv":
            return f"(1/{to_infix(expr.child)})"
        if expr.kind == "square":
            return f"{to_infix(expr.child)}^2"
        return f"{expr.kind}({to_infix(expr.child)})"
    assert isinstance(expr, BinaryOp)
    return f"({to_infix(expr.left)} {_INFIX[expr.kind]} {to_infix(expr.right)})"


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class _EvalFailure(Exception):
    def __init__(self, reason: str):
        self.reason = reason


# Subtrees below this size are cheaper to recompute than to cache.
_CACHE_MIN_SIZE = 8


def _checked(values: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return values
    hi = float(values.max())
    lo = float(values.min())
    if math.isnan(hi):
        raise _EvalFailure("non_finite")
    if hi > OVERFLOW_LIMIT or lo < -OVERFLOW_LIMIT:
        raise _EvalFailure("overflow")
    return values


def _eval(node: Node, X: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
    if cache is not None and node.size >= _CACHE_MIN_SIZE:
        hit = cache.get(node)
        if hit is not None:
            return hit
        values = _eval_op(node, X, cache)
        cache[node] = values
        return values
    return _eval_op(node, X, cache)


def _eval_op(node: Node, X: np.ndarray, cache: Optional[dict]) -> np.ndarray:
    if isinstance(node, Variable):
        return X[:, node.index]
    if isinstance(node, Constant):
        return np.full(X.shape[0], node.value)
    if isinstance(node, UnaryOp):
        c = _eval(node.child, X, cache)
        kind = node.kind
        if kind == "cos":
            return np.cos(c)
        if kind == "sin":
            return np.sin(c)
        if kind == "tan":
            return _checked(np.tan(c))
        if kind == "exp":
            return _checked(np.exp(c))
        if kind == "log":
            if np.any(c <= 0.0):
                raise _EvalFailure("domain_error")
            return _checked(np.log(c))
        if kind == "sqrt":
            if np.any(c < 0.0):
                raise _EvalFailure("domain_error")
            return np.sqrt(c)
        if kind == "inv":
            if np.any(c == 0.0):
                raise _EvalFailure("domain_error")
            return _checked(1.0 / c)
        assert kind == "square"
        return _checked(c * c)
    assert isinstance(node, BinaryOp)
    l = _eval(node.left, X, cache)
    r = _eval(node.right, X, cache)
    kind = node.kind
    if kind == "add":
        return _checked(l + r)
    if kind == "sub":
        return _checked(l - r)
    if kind == "mul":
        return _checked(l * r)
    assert kind == "div"
    if np.any(r == 0.0):
        raise _EvalFailure("domain_error")
    return _checked(l / r)


def evaluate(expr: Node, X: np.ndarray, cache: Optional[dict] = None) -> EvalOutcome:
    """Evaluate ``expr`` row-wise on an (N, d) input matrix.

    All numeric failure modes (log or sqrt outside their domain, division
    by zero, magnitudes beyond ``OVERFLOW_LIMIT``, NaN intermediates) are
    reported as an invalid outcome rather than raised. A variable index
    not covered by ``d`` raises :class:`DimensionError`.

    ``cache`` may hold subtree values from earlier evaluations against
    the very same ``X``; expressions share structure, so a search trial
    passing one dict makes each new evaluation cost only the fresh
    nodes. Entries are keyed structurally and only valid subtrees are
    stored.
    """
    if expr is None:
        raise ValueError("cannot evaluate the empty expression")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if expr.max_var >= X.shape[1]:
        raise DimensionError(f"expression uses x{expr.max_var} but X has {X.shape[1]} columns")
    with np.errstate(all="ignore"):
        try:
            values = _eval(expr, X, cache)
        except _EvalFailure as failure:
            return EvalOutcome(None, failure.reason)
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        return EvalOutcome(None, "non_finite")
    return EvalOutcome(values, None)


# ---------------------------------------------------------------------------
# Simplification
# ---------------------------------------------------------------------------

def _fold_unary(kind: str, v: float) -> Optional[float]:
    try:
        if kind == "cos":
            r = math.cos(v)
        elif kind == "sin":
            r = math.sin(v)
        elif kind == "tan":
            r = math.tan(v)
        elif kind == "exp":
            r = math.exp(v)
        elif kind == "log":
            if v <= 0.0:
                return None
            r = math.log(v)
        elif kind == "sqrt":
            if v < 0.0:
                return None
            r = math.sqrt(v)
        elif kind == "inv":
            if v == 0.0:
                return None
            r = 1.0 / v
        else:
            r = v * v
    except (OverflowError, ValueError):
        return None
    if not math.isfinite(r) or abs(r) > OVERFLOW_LIMIT:
        return None
    return r


def _fold_binary(kind: str, a: float, b: float) -> Optional[float]:
    if kind == "add":
        r = a + b
    elif kind == "sub":
        r = a - b
    elif kind == "mul":
        r = a * b
    else:
        if b == 0.0:
            return None
        r = a / b
    if not math.isfinite(r) or abs(r) > OVERFLOW_LIMIT:
        return None
    return r


def _is_const(node: Node, value: float) -> bool:
    return isinstance(node, Constant) and node.value == value


def simplify(expr: Node) -> Node:
    """Deterministic size-non-increasing rewrite.

    Rules: constant folding (skipped when the fold itself would be
    invalid), additive and multiplicative identities and annihilators
    (x+0, 0+x, x-0, x*1, 1*x, x*0, 0*x, x/1), double inverse, and square
    of a square root. No distribution or factoring, so the result is
    pointwise equal on the shared valid domain and simplification is
    idempotent.
    """
    if isinstance(expr, (Variable, Constant)):
        return expr
    if isinstance(expr, UnaryOp):
        child = simplify(expr.child)
        if isinstance(child, Constant):
            folded = _fold_unary(expr.kind, child.value)
            if folded is not None:
                return Constant(folded)
        if expr.kind == "inv" and isinstance(child, UnaryOp) and child.kind == "inv":
            return child.child
        if expr.kind == "square" and isinstance(child, UnaryOp) and child.kind == "sqrt":
            return child.child
        return expr if child is expr.child else UnaryOp(expr.kind, child)
    assert isinstance(expr, BinaryOp)
    left = simplify(expr.left)
    right = simplify(expr.right)
    if isinstance(left, Constant) and isinstance(right, Constant):
        folded = _fold_binary(expr.kind, left.value, right.value)
        if folded is not None:
            return Constant(folded)
    kind = expr.kind
    if kind == "add":
        if _is_const(left, 0.0):
            return right
        if _is_const(right, 0.0):
            return left
    elif kind == "sub":
        if _is_const(right, 0.0):
            return left
    elif kind == "mul":
        if _is_const(left, 1.0):
            return right
        if _is_const(right, 1.0):
            return left
        if _is_const(left, 0.0) or _is_const(right, 0.0):
            return Constant(0.0)
    else:  # div
        if _is_const(right, 1.0):
            return left
    if left is expr.left and right is expr.right:
        return expr
    return BinaryOp(kind, left, right)

"""Mutation policies and critics.

The interface is small: a policy scores and samples growth mutations for
a (dataset, expression) state, a critic maps the state to a solvability
estimate in [0, 1]. The shipped implementation factorises the mutation
distribution into three linear-softmax stages:

  1. anchor choice over the nodes of the current expression,
  2. operator choice conditioned on the anchor,
  3. argument construction as a pre-order probabilistic grammar over
     operator, variable and constant symbols.

All three stages share the feature maps from :mod:`srmcts.features`,
including residual-projection probes that let the scores reflect which
variables and operator shapes the data still calls for. Structural masks
keep samples inside the representable space (variable indices below the
dataset dimension, a depth bound, and a size budget so grown expressions
cannot exceed the node limit); the nesting rule is not masked and has to
be learned, so invalid samples remain possible and are discarded and
counted by :func:`sample_mutations`.

With all-zero weights every factor is uniform over its legal choices;
:class:`UniformRandomPolicy` is exactly that distribution minus the cost
of computing features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .expressions import (
    BINARY_KINDS,
    UNARY_KINDS,
    BinaryOp,
    Constant,
    MaybeExpr,
    Node,
    UnaryOp,
    Variable,
    node_at,
)
from .features import (
    BASE_DIM,
    NODE_DIM,
    N_PROBES,
    UNARY_PROBE_ROW,
    FitStats,
    _INVALID_FIT,
    base_features,
    compute_fit_stats,
    node_features,
    residual_probes,
    subsample_rows,
)
from .mutations import (
    BINARY_MUTATION_OPS,
    MUTATION_OPS,
    ROOT_REPLACE,
    WRAP_OPS,
    InvalidMutation,
    Mutation,
    validate_mutation,
)

MAX_NODES = 60
MAX_B_DEPTH = 12
N_OPS = len(MUTATION_OPS)  # 17
ROOT_OP_INDEX = MUTATION_OPS.index(ROOT_REPLACE)

# Grammar symbols for argument construction.
SYMBOLS = BINARY_KINDS + UNARY_KINDS + tuple(f"x{i}" for i in range(10)) + ("const",)
N_SYMBOLS = len(SYMBOLS)  # 23
SYM_ARITY = np.array([2] * 4 + [1] * 8 + [0] * 11)
_VAR_SYMBOL_OFFSET = 12
_CONST_SYMBOL = N_SYMBOLS - 1

# Symbol-context layout: base features, op one-hot (8 binary mutation ops
# plus root_replace), parent symbol one-hot (N_SYMBOLS plus start), four
# scalars (depth, emitted, pending, unary scope), child position one-hot,
# then bucketed one-hots for emitted count, pending slots and depth so the
# stopping behaviour can be shaped freely.
_ARG_OPS = BINARY_MUTATION_OPS + (ROOT_REPLACE,)
_N_EMITTED_BUCKETS = 13
_N_PENDING_BUCKETS = 6
_N_DEPTH_BUCKETS = 12
_OFF_OP = BASE_DIM
_OFF_PARENT = _OFF_OP + len(_ARG_OPS)
_OFF_SCAL = _OFF_PARENT + N_SYMBOLS + 1
_OFF_POS = _OFF_SCAL + 4
_OFF_EMITTED = _OFF_POS + 3
_OFF_PENDING = _OFF_EMITTED + _N_EMITTED_BUCKETS
_OFF_DEPTH = _OFF_PENDING + _N_PENDING_BUCKETS
CTX_DIM = _OFF_DEPTH + _N_DEPTH_BUCKETS

# Tied per-variable features scored with shared weights: signed residual
# and target correlations, their magnitudes, two rank indicators, and the
# probe column of that variable.
N_TIED_VAR = 6 + N_PROBES
N_TIED_UNARY = 2

_PROBE_AGG_DIM = 2 * N_PROBES
_OP_INPUT_DIM = NODE_DIM + BASE_DIM + _PROBE_AGG_DIM

PARAM_SHAPES = {
    "anchor_w": (NODE_DIM,),
    "op_w": (N_OPS, _OP_INPUT_DIM),
    "sym_w": (N_SYMBOLS, CTX_DIM),
    "sym_tied_var": (N_TIED_VAR,),
    "sym_tied_unary": (N_TIED_UNARY,),
}


class PolicyExhausted(RuntimeError):
    """No valid mutation could be produced for the given state."""


@dataclass(frozen=True)
class PolicySnapshot:
    version: int
    params: dict[str, np.ndarray]


@dataclass(frozen=True)
class CriticSnapshot:
    version: int
    params: dict[str, np.ndarray]


def _frozen_copy(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, value in params.items():
        arr = np.array(value, dtype=float)
        arr.setflags(write=False)
        out[name] = arr
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _masked_logits(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    out = np.where(legal, logits, -np.inf)
    if not legal.any():
        raise PolicyExhausted("no legal choice")
    return out


class _Categorical:
    """Cumulative-sum sampler over (possibly masked) logits."""

    __slots__ = ("weights", "cum", "total")

    def __init__(self, logits: np.ndarray):
        peak = logits.max()
        if peak == -np.inf:
            raise PolicyExhausted("no legal choice")
        self.weights = np.exp(logits - peak)
        self.cum = np.cumsum(self.weights)
        self.total = float(self.cum[-1])

    def draw(self, rng: np.random.Generator) -> tuple[int, float]:
        r = rng.random() * self.total
        idx = int(np.searchsorted(self.cum, r, side="right"))
        if idx >= len(self.weights) or self.weights[idx] == 0.0:
            idx = int(np.argmax(self.weights))
        return idx, math.log(self.weights[idx] / self.total)

    def log_prob(self, idx: int) -> float:
        w = self.weights[idx]
        return math.log(w / self.total) if w > 0.0 else -math.inf


# Legal-symbol index lists for the uniform walk, keyed by dimension and
# budget/depth variant.
_UNIFORM_LEGAL: dict[tuple[int, str], list[int]] = {}


def _uniform_legal(d: int, variant: str) -> list[int]:
    key = (d, variant)
    cached = _UNIFORM_LEGAL.get(key)
    if cached is None:
        leaves = list(range(_VAR_SYMBOL_OFFSET, _VAR_SYMBOL_OFFSET + d)) + [_CONST_SYMBOL]
        if variant == "leaves":
            cached = leaves
        elif variant == "no_binary":
            cached = list(range(4, 12)) + leaves
        else:
            cached = list(range(12)) + leaves
        _UNIFORM_LEGAL[key] = cached
    return cached


def _budget_variant(depth: int, emitted: int, pending: int, max_b: int) -> str:
    if depth >= MAX_B_DEPTH or emitted + pending + 1 > max_b:
        return "leaves"
    if emitted + pending + 2 > max_b:
        return "no_binary"
    return "full"


def _tied_var_matrix(fit: FitStats, probes: np.ndarray, y_corr: np.ndarray, d: int) -> np.ndarray:
    """(10, N_TIED_VAR) tied feature rows per variable symbol."""
    tv = np.zeros((10, N_TIED_VAR))
    tv[:, 0] = fit.residual_corr
    tv[:, 1] = y_corr
    tv[:, 2] = np.abs(fit.residual_corr)
    tv[:, 3] = np.abs(y_corr)
    strength = probes.max(axis=0)
    if d > 0 and strength[:d].max() > 0:
        order = np.argsort(strength[:d])[::-1]
        tv[order[0], 4] = 1.0
        if d > 1:
            tv[order[1], 5] = 1.0
    tv[:, 6:] = probes.T
    return tv


def _tied_unary_matrix(probes: np.ndarray, d: int) -> np.ndarray:
    """(8, N_TIED_UNARY) probe aggregates per unary symbol kind."""
    tu = np.zeros((8, N_TIED_UNARY))
    for i, kind in enumerate(UNARY_KINDS):
        row = probes[UNARY_PROBE_ROW[kind], :d]
        if row.size:
            tu[i, 0] = row.max()
            tu[i, 1] = row.mean()
    return tu


def _probe_aggregates(probes: np.ndarray, d: int) -> np.ndarray:
    block = probes[:, :d] if d > 0 else probes
    return np.concatenate([block.max(axis=1), block.mean(axis=1)])


class _ArgScorer:
    """Column decomposition of the symbol-context logits.

    The context vector is mostly one-hot, so the full (23, CTX_DIM)
    matrix-vector product collapses into a handful of column adds; the
    result is algebraically identical to scoring the assembled vector.
    Tied contributions (per-variable and per-unary probe scores) do not
    depend on the walk state and are folded into the base vector once.
    """

    __slots__ = ("vec_ops", "parent_cols", "scal", "pos_cols", "emitted_cols",
                 "pending_cols", "depth_cols", "mask_add")

    def __init__(self, params: dict, base: np.ndarray, tied_sym: np.ndarray, d: int):
        sym_w = params["sym_w"]
        vec_base = sym_w[:, :BASE_DIM] @ base + tied_sym
        op_cols = sym_w[:, _OFF_OP:_OFF_OP + len(_ARG_OPS)]
        self.vec_ops = vec_base[:, None] + op_cols  # (N_SYMBOLS, len(_ARG_OPS))
        self.parent_cols = sym_w[:, _OFF_PARENT:_OFF_PARENT + N_SYMBOLS + 1]
        self.scal = sym_w[:, _OFF_SCAL:_OFF_SCAL + 4]
        self.pos_cols = sym_w[:, _OFF_POS:_OFF_POS + 3]
        self.emitted_cols = sym_w[:, _OFF_EMITTED:_OFF_EMITTED + _N_EMITTED_BUCKETS]
        self.pending_cols = sym_w[:, _OFF_PENDING:_OFF_PENDING + _N_PENDING_BUCKETS]
        self.depth_cols = sym_w[:, _OFF_DEPTH:_OFF_DEPTH + _N_DEPTH_BUCKETS]
        self.mask_add = {}
        for variant in ("full", "no_binary", "leaves"):
            add = np.zeros(N_SYMBOLS)
            add[_VAR_SYMBOL_OFFSET + d:_VAR_SYMBOL_OFFSET + 10] = -np.inf
            if variant != "full":
                add[:4] = -np.inf
            if variant == "leaves":
                add[4:12] = -np.inf
            self.mask_add[variant] = add

    def logits(self, op_sub: int, parent: int, depth: int, emitted: int,
               pending: int, scope: bool, child_pos: int, variant: str) -> np.ndarray:
        s = np.array([depth / MAX_B_DEPTH, emitted / 24.0, pending / 12.0, 1.0 if scope else 0.0])
        return (
            self.vec_ops[:, op_sub]
            + self.parent_cols[:, parent]
            + self.scal @ s
            + self.pos_cols[:, child_pos]
            + self.emitted_cols[:, min(emitted, _N_EMITTED_BUCKETS - 1)]
            + self.pending_cols[:, min(pending - 1, _N_PENDING_BUCKETS - 1)]
            + self.depth_cols[:, min(depth, _N_DEPTH_BUCKETS) - 1]
            + self.mask_add[variant]
        )


@dataclass
class PolicyContext:
    """Per-(dataset, expression) tensors reused across repeated draws."""

    dataset: object
    expr: MaybeExpr
    d: int
    fit: FitStats
    base: Optional[np.ndarray]
    nodes: Optional[np.ndarray]
    anchor_logits: Optional[np.ndarray]
    op_logits: Optional[np.ndarray]  # (size, N_OPS)
    op_legal: np.ndarray  # (N_OPS,) size-based legality
    scope_flags: Optional[np.ndarray]  # per node: has unary ancestor
    arg_scorer: Optional[_ArgScorer] = None
    probes: Optional[np.ndarray] = None
    tied_var: Optional[np.ndarray] = None  # (10, N_TIED_VAR)
    tied_unary: Optional[np.ndarray] = None  # (8, N_TIED_UNARY)
    op_extra: Optional[np.ndarray] = None  # probe aggregates in the op input
    cache: dict = field(default_factory=dict)

    def legal_op_indices(self) -> list[int]:
        ops = self.cache.get("legal_ops")
        if ops is None:
            ops = [i for i in range(N_OPS) if self.op_legal[i]]
            self.cache["legal_ops"] = ops
        return ops

    def anchor_sampler(self, temperature: float) -> _Categorical:
        key = ("anchor", temperature)
        sampler = self.cache.get(key)
        if sampler is None:
            sampler = _Categorical(self.anchor_logits / temperature)
            self.cache[key] = sampler
        return sampler

    def op_sampler(self, anchor: int, temperature: float) -> _Categorical:
        key = ("op", anchor, temperature)
        sampler = self.cache.get(key)
        if sampler is None:
            logits = np.where(self.op_legal, self.op_logits[anchor - 1] / temperature, -np.inf)
            sampler = _Categorical(logits)
            self.cache[key] = sampler
        return sampler


class MutationPolicy:
    """Base class; concrete policies implement the three factor scores."""

    uniform = False

    def make_context(
        self, dataset, expr: MaybeExpr, rng: np.random.Generator, fit: Optional[FitStats] = None
    ) -> PolicyContext:
        expr_size = 0 if expr is None else expr.size
        legal = np.zeros(N_OPS, dtype=bool)
        if expr is None:
            legal[ROOT_OP_INDEX] = True
        else:
            for i, op in enumerate(MUTATION_OPS):
                if op == ROOT_REPLACE:
                    continue
                needed = 1 if op in WRAP_OPS else 2
                legal[i] = expr_size + needed <= MAX_NODES
        if not legal.any():
            raise PolicyExhausted(f"expression of size {expr_size} admits no growth")

        base = nodes = anchor_logits = op_logits = scope = scorer = None
        probes = tied_var = tied_unary = op_extra = None
        if self.uniform:
            fit = _INVALID_FIT
            if expr is not None:
                scope = np.array(_unary_ancestor_flags(expr), dtype=float)
        else:
            if fit is None or (expr is not None and fit.residual is None and fit.valid):
                rows = subsample_rows(dataset.n, rng)
                fit = compute_fit_stats(dataset, expr, rows)
            if expr is None:
                # against the empty expression the whole target is residual
                rows = fit.rows if fit.rows is not None else subsample_rows(dataset.n, rng)
                probes = residual_probes(dataset, rows, dataset.y[rows])
            elif fit.valid and fit.residual is not None:
                probes = residual_probes(dataset, fit.rows, fit.residual)
            else:
                probes = np.zeros((N_PROBES, 10))
            _, _, y_corr = dataset.stats()
            base = base_features(dataset, expr, fit)
            tied_var = _tied_var_matrix(fit, probes, y_corr, dataset.d)
            tied_unary = _tied_unary_matrix(probes, dataset.d)
            tied_sym = np.zeros(N_SYMBOLS)
            tied_sym[4:12] = tied_unary @ self.params["sym_tied_unary"]
            tied_sym[_VAR_SYMBOL_OFFSET:_VAR_SYMBOL_OFFSET + 10] = (
                tied_var @ self.params["sym_tied_var"]
            )
            scorer = _ArgScorer(self.params, base, tied_sym, dataset.d)
            op_extra = _probe_aggregates(probes, dataset.d)
            if expr is not None:
                nodes = node_features(expr, fit)
                scope = nodes[:, 7]
                anchor_logits = nodes @ self.params["anchor_w"]
                op_inputs = np.concatenate(
                    [
                        nodes,
                        np.tile(base, (expr_size, 1)),
                        np.tile(op_extra, (expr_size, 1)),
                    ],
                    axis=1,
                )
                op_logits = op_inputs @ self.params["op_w"].T
        return PolicyContext(
            dataset, expr, dataset.d, fit, base, nodes, anchor_logits, op_logits,
            legal, scope, scorer, probes, tied_var, tied_unary, op_extra,
        )

    # -- factor distributions -------------------------------------------------

    def anchor_probs(self, ctx: PolicyContext, temperature: float = 1.0) -> np.ndarray:
        n = ctx.expr.size
        logits = np.zeros(n) if ctx.anchor_logits is None else ctx.anchor_logits
        return _softmax(logits / temperature)

    def op_probs(self, ctx: PolicyContext, anchor: int, temperature: float = 1.0) -> np.ndarray:
        if ctx.op_logits is None:
            logits = np.zeros(N_OPS)
        else:
            logits = ctx.op_logits[anchor - 1]
        return _softmax(_masked_logits(logits / temperature, ctx.op_legal))

    def _symbol_mask(self, d: int, depth: int, emitted: int, pending: int, max_b: int) -> np.ndarray:
        legal = np.ones(N_SYMBOLS, dtype=bool)
        legal[_VAR_SYMBOL_OFFSET + d:_VAR_SYMBOL_OFFSET + 10] = False
        if depth >= MAX_B_DEPTH:
            legal[:12] = False
        else:
            # expanding with arity a needs room for this node, its pending
            # siblings and one further node per new slot
            feasible = emitted + 1 + (pending - 1) + SYM_ARITY[:12] <= max_b
            legal[:12] &= feasible
        return legal

    def _symbol_ctx(
        self,
        ctx: PolicyContext,
        op: str,
        parent: int,
        depth: int,
        emitted: int,
        pending: int,
        scope: bool,
        child_pos: int,
    ) -> np.ndarray:
        vec = np.zeros(CTX_DIM)
        vec[:BASE_DIM] = ctx.base
        vec[_OFF_OP + _ARG_OPS.index(op)] = 1.0
        vec[_OFF_PARENT + parent] = 1.0  # N_SYMBOLS marks the start slot
        vec[_OFF_SCAL] = depth / MAX_B_DEPTH
        vec[_OFF_SCAL + 1] = emitted / 24.0
        vec[_OFF_SCAL + 2] = pending / 12.0
        vec[_OFF_SCAL + 3] = 1.0 if scope else 0.0
        vec[_OFF_POS + child_pos] = 1.0
        vec[_OFF_EMITTED + min(emitted, _N_EMITTED_BUCKETS - 1)] = 1.0
        vec[_OFF_PENDING + min(pending - 1, _N_PENDING_BUCKETS - 1)] = 1.0
        vec[_OFF_DEPTH + min(depth, _N_DEPTH_BUCKETS) - 1] = 1.0
        return vec

    def _symbol_logits(self, ctx: PolicyContext, vec: np.ndarray) -> np.ndarray:
        logits = self.params["sym_w"] @ vec
        logits[4:12] += ctx.tied_unary @ self.params["sym_tied_unary"]
        logits[_VAR_SYMBOL_OFFSET:_VAR_SYMBOL_OFFSET + 10] += (
            ctx.tied_var @ self.params["sym_tied_var"]
        )
        return logits

    # -- sampling --------------------------------------------------------------

    def sample_raw(
        self, ctx: PolicyContext, temperature: float, rng: np.random.Generator
    ) -> tuple[Mutation, float]:
        """One unvalidated draw plus its log-probability."""
        logp = 0.0
        if ctx.expr is None:
            anchor = 0
            op_index = ROOT_OP_INDEX
        elif self.uniform:
            n = ctx.expr.size
            anchor = int(rng.integers(n)) + 1
            logp -= math.log(n)
            legal = ctx.legal_op_indices()
            op_index = legal[rng.integers(len(legal))]
            logp -= math.log(len(legal))
        else:
            anchor_idx, anchor_logp = ctx.anchor_sampler(temperature).draw(rng)
            anchor = anchor_idx + 1
            logp += anchor_logp
            op_index, op_logp = ctx.op_sampler(anchor, temperature).draw(rng)
            logp += op_logp
        op = MUTATION_OPS[op_index]
        arg = None
        if op in BINARY_MUTATION_OPS or op == ROOT_REPLACE:
            host_scope = False
            max_b = MAX_NODES
            if ctx.expr is not None:
                host_scope = bool(ctx.scope_flags[anchor - 1])
                max_b = MAX_NODES - ctx.expr.size - 1
            arg, arg_logp = self._walk_argument(ctx, op, host_scope, max_b, temperature, rng)
            logp += arg_logp
        return Mutation(anchor, op, arg), logp

    def _walk_argument(
        self,
        ctx: PolicyContext,
        op: str,
        host_scope: bool,
        max_b: int,
        temperature: float,
        rng: np.random.Generator,
    ) -> tuple[Node, float]:
        state = {"emitted": 0, "logp": 0.0}
        scorer = ctx.arg_scorer
        op_sub = _ARG_OPS.index(op)
        inv_t = 1.0 / temperature
        slot_cache = ctx.cache

        def grow(parent: int, depth: int, pending: int, scope: bool, child_pos: int) -> Node:
            variant = _budget_variant(depth, state["emitted"], pending, max_b)
            if scorer is None:
                legal = _uniform_legal(ctx.d, variant)
                sym = legal[rng.integers(len(legal))]
                state["logp"] -= math.log(len(legal))
            else:
                # slot distributions depend only on this key, and walk
                # prefixes repeat across the draws sharing this context
                key = (op_sub, parent, depth, state["emitted"], pending, scope, child_pos,
                       variant, temperature)
                sampler = slot_cache.get(key)
                if sampler is None:
                    logits = scorer.logits(
                        op_sub, parent, depth, state["emitted"], pending, scope, child_pos, variant
                    )
                    sampler = _Categorical(logits * inv_t)
                    slot_cache[key] = sampler
                sym, sym_logp = sampler.draw(rng)
                state["logp"] += sym_logp
            state["emitted"] += 1
            if sym < 4:
                left = grow(sym, depth + 1, pending + 1, scope, 1)
                right = grow(sym, depth + 1, pending, scope, 2)
                return BinaryOp(SYMBOLS[sym], left, right)
            if sym < 12:
                return UnaryOp(SYMBOLS[sym], grow(sym, depth + 1, pending, True, 0))
            if sym == _CONST_SYMBOL:
                return Constant(float(rng.normal()))
            return Variable(sym - _VAR_SYMBOL_OFFSET)

        node = grow(N_SYMBOLS, 1, 1, host_scope, 0)
        return node, state["logp"]

    # -- exact log-probability of a given mutation -----------------------------

    def log_prob(
        self,
        dataset,
        expr: MaybeExpr,
        mutation: Mutation,
        temperature: float = 1.0,
        rng: Optional[np.random.Generator] = None,
    ) -> float:
        """Log-probability of ``mutation`` in the given state (-inf if unreachable)."""
        reason = validate_mutation(expr, mutation)
        if reason is not None:
            raise InvalidMutation(reason)
        if rng is None:
            rng = np.random.default_rng(0)
        try:
            ctx = self.make_context(dataset, expr, rng)
        except PolicyExhausted:
            return -math.inf
        return self.log_prob_in_context(ctx, mutation, temperature)

    def log_prob_in_context(
        self, ctx: PolicyContext, mutation: Mutation, temperature: float = 1.0
    ) -> float:
        logp = 0.0
        if ctx.expr is not None:
            probs = self.anchor_probs(ctx, temperature)
            p = probs[mutation.anchor - 1]
            if p <= 0.0:
                return -math.inf
            logp += math.log(p)
            op_index = MUTATION_OPS.index(mutation.op)
            if not ctx.op_legal[op_index]:
                return -math.inf
            logp += math.log(self.op_probs(ctx, mutation.anchor, temperature)[op_index])
        if mutation.arg is not None:
            host_scope = False
            max_b = MAX_NODES
            if ctx.expr is not None:
                host_scope = bool(ctx.scope_flags[mutation.anchor - 1])
                max_b = MAX_NODES - ctx.expr.size - 1
            arg_logp = self._trace_argument(
                ctx, mutation.op, mutation.arg, host_scope, max_b, temperature
            )
            if arg_logp == -math.inf:
                return -math.inf
            logp += arg_logp
        return logp

    def _trace_argument(
        self, ctx: PolicyContext, op: str, arg: Node, host_scope: bool, max_b: int, temperature: float
    ) -> float:
        state = {"emitted": 0, "logp": 0.0}

        def descend(node: Node, parent: int, depth: int, pending: int, scope: bool, child_pos: int) -> bool:
            legal = self._symbol_mask(ctx.d, depth, state["emitted"], pending, max_b)
            if self.uniform or ctx.base is None:
                logits = np.zeros(N_SYMBOLS)
            else:
                logits = self._symbol_logits(
                    ctx,
                    self._symbol_ctx(ctx, op, parent, depth, state["emitted"], pending, scope, child_pos),
                )
            sym = _symbol_of(node)
            if not legal[sym]:
                return False
            probs = _softmax(_masked_logits(logits / temperature, legal))
            state["logp"] += math.log(probs[sym])
            state["emitted"] += 1
            if isinstance(node, BinaryOp):
                return descend(node.left, sym, depth + 1, pending + 1, scope, 1) and descend(
                    node.right, sym, depth + 1, pending, scope, 2
                )
            if isinstance(node, UnaryOp):
                return descend(node.child, sym, depth + 1, pending, True, 0)
            return True

        ok = descend(arg, N_SYMBOLS, 1, 1, host_scope, 0)
        return state["logp"] if ok else -math.inf

    # -- convenience ------------------------------------------------------------

    def sample(self, dataset, expr, k, temperature, rng, stats=None):
        return sample_mutations(self, dataset, expr, k, temperature, rng, stats=stats)


def _symbol_of(node: Node) -> int:
    if isinstance(node, BinaryOp):
        return BINARY_KINDS.index(node.kind)
    if isinstance(node, UnaryOp):
        return 4 + UNARY_KINDS.index(node.kind)
    if isinstance(node, Variable):
        return _VAR_SYMBOL_OFFSET + node.index
    return _CONST_SYMBOL


def _unary_ancestor_flags(expr: Node) -> list[bool]:
    flags: list[bool] = []
    stack: list[tuple[Node, bool]] = [(expr, False)]
    while stack:
        node, under = stack.pop()
        flags.append(under)
        if isinstance(node, UnaryOp):
            stack.append((node.child, True))
        elif isinstance(node, BinaryOp):
            stack.append((node.right, under))
            stack.append((node.left, under))
    return flags


class FactoredPolicy(MutationPolicy):
    """Learnable three-factor policy with linear-softmax scores."""

    def __init__(self, params: Optional[dict[str, np.ndarray]] = None, init_scale: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        if params is None:
            if init_scale > 0.0:
                rng = rng or np.random.default_rng(0)
                params = {k: rng.normal(0.0, init_scale, size=s) for k, s in PARAM_SHAPES.items()}
            else:
                params = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
        for name, shape in PARAM_SHAPES.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} must have shape {shape}")
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}

    def snapshot(self, version: int = 0) -> PolicySnapshot:
        return PolicySnapshot(version, _frozen_copy(self.params))

    @classmethod
    def from_snapshot(cls, snap: PolicySnapshot) -> "FactoredPolicy":
        return cls(params={k: np.array(v) for k, v in snap.params.items()})


class UniformRandomPolicy(MutationPolicy):
    """Uniform measure over legal anchors, operators and argument symbols.

    Identical to a zero-weight :class:`FactoredPolicy` but skips feature
    computation entirely.
    """

    uniform = True
    params: dict[str, np.ndarray] = {}

    def snapshot(self, version: int = 0) -> PolicySnapshot:
        return PolicySnapshot(version, {})


# ---------------------------------------------------------------------------
# Constrained sampling with validity accounting
# ---------------------------------------------------------------------------

def _constraint_violation_kind(ctx: PolicyContext, mutation: Mutation) -> Optional[str]:
    """Violation kind of the grown expression, without building it.

    Valid for expressions that already satisfy the constraints (always
    true for search states), where the only new failure modes are the
    size cap and unary nesting introduced at the mutation site. Agrees
    with applying the mutation and running the full check.
    """
    expr = ctx.expr
    if mutation.op == ROOT_REPLACE:
        arg = mutation.arg
        if arg.size > MAX_NODES:
            return "too_large"
        return None if arg.nesting_ok else "nesting"
    anchor_node = node_at(expr, mutation.anchor)
    under_unary = bool(ctx.scope_flags[mutation.anchor - 1])
    if mutation.op in WRAP_OPS:
        if expr.size + 1 > MAX_NODES:
            return "too_large"
        if anchor_node.has_unary or under_unary:
            return "nesting"
        return None
    arg = mutation.arg
    if expr.size + 1 + arg.size > MAX_NODES:
        return "too_large"
    if not arg.nesting_ok or (arg.has_unary and under_unary):
        return "nesting"
    return None


def sample_mutations(
    policy: MutationPolicy,
    dataset,
    expr: MaybeExpr,
    k: int,
    temperature: float,
    rng: np.random.Generator,
    stats: Optional[dict] = None,
    fit: Optional[FitStats] = None,
) -> list[tuple[Mutation, float]]:
    """Up to ``k`` distinct valid mutations with their log-probabilities.

    Raw draws that fail validation or whose application would break the
    structural constraints are discarded and counted in ``stats``.
    Raises :class:`PolicyExhausted` when 10*k attempts produce nothing.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    ctx = policy.make_context(dataset, expr, rng, fit=fit)
    found: dict[Mutation, float] = {}
    budget = 10 * k
    for _ in range(budget):
        mutation, logp = policy.sample_raw(ctx, temperature, rng)
        if mutation in found:
            continue
        reason = validate_mutation(expr, mutation)
        if reason is not None:
            if stats is not None:
                stats["discarded_invalid"] = stats.get("discarded_invalid", 0) + 1
            continue
        kind = _constraint_violation_kind(ctx, mutation)
        if kind is not None:
            if stats is not None:
                stats["discarded_constraints"] = stats.get("discarded_constraints", 0) + 1
                key = f"discarded_{kind}"
                stats[key] = stats.get(key, 0) + 1
            continue
        found[mutation] = logp
        if len(found) >= k:
            break
    if not found:
        raise PolicyExhausted(f"no valid mutation within {budget} attempts")
    return list(found.items())


# ---------------------------------------------------------------------------
# Imitation training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MutationExample:
    dataset: object
    state: MaybeExpr
    mutation: Mutation


def _nll_and_grads_single(policy: FactoredPolicy, example: MutationExample, rng, grads):
    """Accumulate cross-entropy gradients for one (state, action) pair."""
    dataset, expr, mutation = example.dataset, example.state, example.mutation
    ctx = policy.make_context(dataset, expr, rng)
    nll = 0.0
    if expr is not None:
        probs = policy.anchor_probs(ctx)
        target = mutation.anchor - 1
        nll -= math.log(max(probs[target], 1e-300))
        delta = probs.copy()
        delta[target] -= 1.0
        grads["anchor_w"] += ctx.nodes.T @ delta
        op_probs = policy.op_probs(ctx, mutation.anchor)
        op_index = MUTATION_OPS.index(mutation.op)
        nll -= math.log(max(op_probs[op_index], 1e-300))
        d_op = op_probs.copy()
        d_op[op_index] -= 1.0
        op_input = np.concatenate([ctx.nodes[target], ctx.base, ctx.op_extra])
        grads["op_w"] += np.outer(d_op, op_input)
    if mutation.arg is not None:
        host_scope = False
        max_b = MAX_NODES
        if expr is not None:
            host_scope = bool(ctx.scope_flags[mutation.anchor - 1])
            max_b = MAX_NODES - expr.size - 1
        nll += _arg_nll_and_grads(policy, ctx, mutation.op, mutation.arg, host_scope, max_b, grads)
    return nll


def _arg_nll_and_grads(policy, ctx, op, arg, host_scope, max_b, grads) -> float:
    state = {"emitted": 0, "nll": 0.0}

    def descend(node, parent, depth, pending, scope, child_pos):
        legal = policy._symbol_mask(ctx.d, depth, state["emitted"], pending, max_b)
        vec = policy._symbol_ctx(ctx, op, parent, depth, state["emitted"], pending, scope, child_pos)
        logits = policy._symbol_logits(ctx, vec)
        sym = _symbol_of(node)
        probs = _softmax(_masked_logits(logits, legal))
        state["nll"] -= math.log(max(probs[sym], 1e-300))
        delta = probs.copy()
        delta[sym] -= 1.0
        grads["sym_w"] += np.outer(delta, vec)
        grads["sym_tied_var"] += delta[_VAR_SYMBOL_OFFSET:_VAR_SYMBOL_OFFSET + 10] @ ctx.tied_var
        grads["sym_tied_unary"] += delta[4:12] @ ctx.tied_unary
        state["emitted"] += 1
        if isinstance(node, BinaryOp):
            descend(node.left, sym, depth + 1, pending + 1, scope, 1)
            descend(node.right, sym, depth + 1, pending, scope, 2)
        elif isinstance(node, UnaryOp):
            descend(node.child, sym, depth + 1, pending, True, 0)

    descend(arg, N_SYMBOLS, 1, 1, host_scope, 0)
    return state["nll"]


def nll_and_grads(
    policy: FactoredPolicy,
    batch: Sequence[MutationExample],
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of the batch and its parameter gradients."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if rng is None:
        rng = np.random.default_rng(0)
    grads = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    total = 0.0
    for example in batch:
        total += _nll_and_grads_single(policy, example, rng, grads)
    n = len(batch)
    for g in grads.values():
        g /= n
    return total / n, grads


def imitation_update(
    policy: FactoredPolicy,
    batch: Sequence[MutationExample],
    learning_rate: float,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """One plain gradient step on the mean NLL; returns the pre-step loss."""
    loss, grads = nll_and_grads(policy, batch, rng)
    if learning_rate != 0.0:
        for name, grad in grads.items():
            policy.params[name] -= learning_rate * grad
    return loss


def mean_nll(
    policy: FactoredPolicy,
    examples: Sequence[MutationExample],
    temperature: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> float:
    if rng is None:
        rng = np.random.default_rng(0)
    total = 0.0
    for example in examples:
        total -= policy.log_prob(example.dataset, example.state, example.mutation, temperature, rng)
    return total / len(examples)


def uniform_nll(examples: Sequence[MutationExample]) -> float:
    """Mean NLL of the uniform measure over the same action space."""
    probe = UniformRandomPolicy()
    return mean_nll(probe, examples)


class AdamState:
    """Adam accumulator over a named parameter dict."""

    def __init__(self, shapes: dict[str, tuple], lr: float = 0.02, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name, grad in grads.items():
            self.m[name] = b1 * self.m[name] + (1 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
            params[name] -= self.lr * correction * self.m[name] / (np.sqrt(self.v[name]) + self.eps)


def pretrain(
    policy: FactoredPolicy,
    examples: Sequence[MutationExample],
    *,
    rng: np.random.Generator,
    epochs: int = 10,
    batch_size: int = 64,
    lr: float = 0.02,
    holdout: Sequence[MutationExample] = (),
    time_limit: Optional[float] = None,
    verbose: bool = False,
) -> list[float]:
    """Adam-driven imitation over a corpus; returns per-epoch training NLL."""
    import time

    optimizer = AdamState(PARAM_SHAPES, lr=lr)
    history = []
    start = time.monotonic()
    items = list(examples)
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        running = 0.0
        batches = 0
        for lo in range(0, len(items), batch_size):
            batch = [items[i] for i in order[lo:lo + batch_size]]
            loss, grads = nll_and_grads(policy, batch, rng)
            optimizer.step(policy.params, grads)
            running += loss
            batches += 1
            if time_limit is not None and time.monotonic() - start > time_limit:
                break
        history.append(running / max(batches, 1))
        if verbose:
            held = f" holdout={mean_nll(policy, holdout):.3f}" if holdout else ""
            print(f"epoch {epoch}: nll={history[-1]:.3f}{held}")
        if time_limit is not None and time.monotonic() - start > time_limit:
            break
    return history


# ---------------------------------------------------------------------------
# Critics
# ---------------------------------------------------------------------------

class ConstantCritic:
    """Baseline critic: the same value everywhere."""

    needs_features = False

    def __init__(self, constant: float = 0.5):
        self.constant = float(constant)
        self.params: dict[str, np.ndarray] = {}

    def value(self, dataset, expr: MaybeExpr, rng=None, fit=None) -> float:
        return self.constant

    def snapshot(self, version: int = 0) -> CriticSnapshot:
        return CriticSnapshot(version, {"constant": np.array([self.constant])})


class LearnedCritic:
    """Sigmoid of a linear score over the shared base features."""

    needs_features = True

    def __init__(self, params: Optional[dict[str, np.ndarray]] = None):
        if params is None:
            params = {"critic_w": np.zeros(BASE_DIM)}
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}

    def value(self, dataset, expr: MaybeExpr, rng=None, fit=None) -> float:
        """Bounded estimate; ``fit`` may carry precomputed fit statistics."""
        if fit is None:
            if rng is None:
                rng = np.random.default_rng(0)
            rows = subsample_rows(dataset.n, rng)
            fit = compute_fit_stats(dataset, expr, rows)
        score = float(self.params["critic_w"] @ base_features(dataset, expr, fit))
        return 1.0 / (1.0 + math.exp(-score))

    def snapshot(self, version: int = 0) -> CriticSnapshot:
        return CriticSnapshot(version, _frozen_copy(self.params))

    @classmethod
    def from_snapshot(cls, snap: CriticSnapshot) -> "LearnedCritic":
        return cls(params={k: np.array(v) for k, v in snap.params.items()})


@dataclass(frozen=True)
class CriticExample:
    dataset: object
    expr: MaybeExpr
    target: float


def critic_update(
    critic: LearnedCritic,
    batch: Sequence[CriticExample],
    learning_rate: float,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """One squared-error gradient step; returns the pre-step mean loss."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if rng is None:
        rng = np.random.default_rng(0)
    grad = np.zeros(BASE_DIM)
    loss = 0.0
    for example in batch:
        if not 0.0 <= example.target <= 1.0:
            raise ValueError(f"critic target {example.target} outside [0, 1]")
        rows = subsample_rows(example.dataset.n, rng)
        fit = compute_fit_stats(example.dataset, example.expr, rows)
        phi = base_features(example.dataset, example.expr, fit)
        p = 1.0 / (1.0 + math.exp(-float(critic.params["critic_w"] @ phi)))
        loss += (p - example.target) ** 2
        grad += 2.0 * (p - example.target) * p * (1.0 - p) * phi
    n = len(batch)
    if learning_rate != 0.0:
        critic.params["critic_w"] -= learning_rate * grad / n
    return loss / n


# ---------------------------------------------------------------------------
# Model persistence (flat named arrays)
# ---------------------------------------------------------------------------

def save_model(path, policy, critic, version: int = 0) -> None:
    arrays = {"__version__": np.array([version])}
    for name, value in policy.params.items():
        arrays[f"policy-{name}"] = value
    for name, value in critic.params.items():
        arrays[f"critic-{name}"] = value
    np.savez(path, **arrays)


def load_model(path) -> tuple[FactoredPolicy, LearnedCritic, int]:
    data = np.load(path)
    version = int(data["__version__"][0])
    policy_params = {}
    critic_params = {}
    for key in data.files:
        if key.startswith("policy-"):
            policy_params[key[len("policy-"):]] = data[key]
        elif key.startswith("critic-"):
            critic_params[key[len("critic-"):]] = data[key]
    return FactoredPolicy(policy_params), LearnedCritic(critic_params or None), version

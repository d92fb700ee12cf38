import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srmcts.expressions import (
    BinaryOp,
    Constant,
    ConstraintConfig,
    DimensionError,
    ParseError,
    UnaryOp,
    Variable,
    check_constraints,
    evaluate,
    iter_preorder,
    node_at,
    parse_prefix,
    replace_node,
    simplify,
    size,
    to_prefix,
)

from conftest import random_expression

expr_seeds = st.integers(0, 10**6)


class TestParsePrefix:
    def test_basic(self):
        e = parse_prefix(["add", "x0", "x1"])
        assert isinstance(e, BinaryOp) and e.kind == "add"
        assert e.left == Variable(0) and e.right == Variable(1)

    def test_round_trip_tokens(self):
        tokens = ["mul", "3.0", "x0"]
        assert to_prefix(parse_prefix(tokens)) == tokens

    def test_truncated(self):
        with pytest.raises(ParseError, match="truncated"):
            parse_prefix(["add", "x0"])

    def test_excess_tokens(self):
        with pytest.raises(ParseError, match="excess"):
            parse_prefix(["x0", "x1"])

    def test_unknown_token(self):
        with pytest.raises(ParseError, match="unknown"):
            parse_prefix(["frobnicate"])

    def test_variable_index_cap(self):
        with pytest.raises(ParseError):
            parse_prefix(["x10"])

    def test_triplet_constant(self):
        e = parse_prefix(["add", "+", "3142", "E-3", "x0"])
        assert isinstance(e.left, Constant) and e.left.value == pytest.approx(3.142)

    def test_accepts_string(self):
        assert parse_prefix("cos x2") == UnaryOp("cos", Variable(2))


class TestToPrefix:
    def test_examples(self):
        assert to_prefix(parse_prefix("add x0 x1")) == ["add", "x0", "x1"]
        assert to_prefix(UnaryOp("cos", Variable(2))) == ["cos", "x2"]

    @settings(max_examples=150, deadline=None)
    @given(expr_seeds)
    def test_round_trip_random(self, seed):
        e = random_expression(seed)
        assert parse_prefix(to_prefix(e)) == e


class TestEvaluate:
    def test_addition(self):
        out = evaluate(parse_prefix("add x0 x1"), np.array([[1.0, 2.0]]))
        assert out.ok and out.values[0] == 3.0

    def test_log_domain(self):
        out = evaluate(parse_prefix("log x0"), np.array([[-1.0]]))
        assert not out.ok and out.reason == "domain_error"

    def test_inverse(self):
        out = evaluate(parse_prefix("inv x0"), np.array([[4.0]]))
        assert out.ok and out.values[0] == 0.25

    def test_division_by_zero(self):
        out = evaluate(parse_prefix("div x0 x1"), np.array([[1.0, 0.0]]))
        assert not out.ok and out.reason == "domain_error"

    def test_overflow(self):
        out = evaluate(parse_prefix("exp exp x0"), np.array([[100.0]]))
        assert not out.ok and out.reason == "overflow"

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            evaluate(parse_prefix("x3"), np.array([[1.0, 2.0]]))

    @settings(max_examples=100, deadline=None)
    @given(expr_seeds, st.integers(0, 10**6))
    def test_totality(self, seed, data_seed):
        e = random_expression(seed)
        X = np.random.default_rng(data_seed).normal(0, 2, size=(17, 3))
        out = evaluate(e, X)  # must not raise on numeric content
        if out.ok:
            assert out.values.shape == (17,)
            assert np.all(np.isfinite(out.values))
        else:
            assert out.reason in ("domain_error", "overflow", "non_finite")


class TestSize:
    def test_leaf(self):
        assert size(parse_prefix("x0")) == 1

    def test_counts_all_nodes(self):
        assert size(parse_prefix("add x0 mul 2.1 x1")) == 5

    def test_empty(self):
        assert size(None) == 0

    def test_after_simplify(self):
        assert size(simplify(parse_prefix("add x0 0.0"))) == 1


class TestSimplify:
    def test_additive_identity(self):
        assert simplify(parse_prefix("add x0 0.0")) == Variable(0)

    def test_constant_folding(self):
        assert simplify(parse_prefix("mul 2.0 3.0")) == Constant(6.0)

    def test_multiplicative_identities(self):
        assert simplify(parse_prefix("div mul x0 1.0 1.0")) == Variable(0)

    def test_annihilator(self):
        assert simplify(parse_prefix("mul x0 0.0")) == Constant(0.0)

    def test_double_inverse(self):
        assert simplify(parse_prefix("inv inv x0")) == Variable(0)

    def test_square_of_sqrt(self):
        assert simplify(parse_prefix("square sqrt x0")) == Variable(0)

    def test_no_fold_of_invalid(self):
        e = parse_prefix("log -1.0")
        assert simplify(e) == e

    @settings(max_examples=150, deadline=None)
    @given(expr_seeds, st.integers(0, 10**6))
    def test_soundness(self, seed, data_seed):
        e = random_expression(seed)
        s = simplify(e)
        X = np.random.default_rng(data_seed).normal(0, 2, size=(25, 3))
        before, after = evaluate(e, X), evaluate(s, X)
        if before.ok and after.ok:
            np.testing.assert_allclose(after.values, before.values, rtol=1e-9, atol=1e-9)

    @settings(max_examples=150, deadline=None)
    @given(expr_seeds)
    def test_monotone_and_idempotent(self, seed):
        e = random_expression(seed)
        s = simplify(e)
        assert s.size <= e.size
        assert simplify(s) == s


def _chain(n_nodes: int):
    """Alternating chain with exactly n_nodes nodes (no unary nesting)."""
    e = Variable(0)
    while e.size + 2 <= n_nodes:
        e = BinaryOp("add", e, Variable(1))
    if e.size < n_nodes:
        e = UnaryOp("cos", e)
    assert e.size == n_nodes
    return e


class TestConstraints:
    def test_nested_unary(self):
        v = check_constraints(parse_prefix("cos cos x0"))
        assert v is not None and v.kind == "nesting"

    def test_nesting_through_arithmetic(self):
        v = check_constraints(parse_prefix("cos add x0 sin x1"))
        assert v is not None and v.kind == "nesting"

    def test_size_cap_61(self):
        v = check_constraints(_chain(61))
        assert v is not None and v.kind == "too_large"

    def test_size_cap_60_passes(self):
        assert check_constraints(_chain(60)) is None

    def test_custom_cap(self):
        cfg = ConstraintConfig(max_operators=3)
        assert check_constraints(parse_prefix("add x0 mul x1 x1"), cfg).kind == "too_large"


class TestNodeAt:
    def test_root_is_one(self):
        e = parse_prefix("add x0 x1")
        assert node_at(e, 1) is e

    def test_preorder(self):
        e = parse_prefix("add x0 x1")
        assert node_at(e, 2) == Variable(0)
        assert node_at(e, 3) == Variable(1)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            node_at(parse_prefix("add x0 x1"), 4)

    @settings(max_examples=100, deadline=None)
    @given(expr_seeds)
    def test_bijection(self, seed):
        e = random_expression(seed)
        by_index = [node_at(e, i) for i in range(1, e.size + 1)]
        by_walk = list(iter_preorder(e))
        assert by_index == by_walk

    def test_replace_preserves_prefix_positions(self):
        e = parse_prefix("add x0 mul x1 x2")
        replaced = replace_node(e, 3, Variable(0))
        assert to_prefix(replaced) == ["add", "x0", "x0"]

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srmcts.expressions import Variable, check_constraints, parse_prefix, size, to_prefix
from srmcts.mutations import (
    GOAL_SINGLE_STEP,
    MUTATION_OPS,
    ConstraintViolation,
    InvalidMutation,
    Mutation,
    apply_mutation,
    dismantle,
    replay,
    validate_mutation,
)

from conftest import random_expression

expr_seeds = st.integers(0, 10**6)


class TestApplyMutation:
    def test_root_replace_on_empty(self):
        result = apply_mutation(None, Mutation(0, "root_replace", parse_prefix("x0")))
        assert result == Variable(0)

    def test_add_right(self):
        result = apply_mutation(parse_prefix("x0"), Mutation(1, "add_right", parse_prefix("x1")))
        assert to_prefix(result) == ["add", "x0", "x1"]

    def test_left_variants_put_argument_first(self):
        result = apply_mutation(parse_prefix("x0"), Mutation(1, "sub_left", parse_prefix("x1")))
        assert to_prefix(result) == ["sub", "x1", "x0"]

    def test_wrap_at_preorder_index(self):
        result = apply_mutation(parse_prefix("add x0 x1"), Mutation(3, "wrap_cos"))
        assert to_prefix(result) == ["add", "x0", "cos", "x1"]

    def test_constraint_violation_raised(self):
        with pytest.raises(ConstraintViolation):
            apply_mutation(parse_prefix("cos x0"), Mutation(2, "wrap_sin"))

    @settings(max_examples=100, deadline=None)
    @given(expr_seeds, st.integers(0, 10**6))
    def test_strict_growth(self, seed, mseed):
        from srmcts.datagen import Dataset
        from srmcts.policy import UniformRandomPolicy

        e = random_expression(seed)
        rng = np.random.default_rng(mseed)
        X = rng.normal(size=(8, 3))
        ds = Dataset(X=X, y=X[:, 0], id="t")
        policy = UniformRandomPolicy()
        ctx = policy.make_context(ds, e, rng)
        for _ in range(5):
            m, _ = policy.sample_raw(ctx, 1.0, rng)
            if validate_mutation(e, m) is None:
                try:
                    grown = apply_mutation(e, m)
                except ConstraintViolation:
                    continue
                assert size(grown) > size(e)


class TestValidateMutation:
    def test_bad_index(self):
        assert validate_mutation(parse_prefix("x0"), Mutation(5, "add_right", Variable(0))) == "bad_index"

    def test_missing_arg(self):
        assert validate_mutation(parse_prefix("x0"), Mutation(1, "add_right")) == "missing_arg"

    def test_wrap_ok(self):
        assert validate_mutation(parse_prefix("x0"), Mutation(1, "wrap_cos")) is None

    def test_extra_arg(self):
        assert validate_mutation(parse_prefix("x0"), Mutation(1, "wrap_cos", Variable(0))) == "extra_arg"

    def test_root_replace_needs_empty(self):
        assert (
            validate_mutation(parse_prefix("x0"), Mutation(0, "root_replace", Variable(1)))
            == "root_replace_requires_empty"
        )

    def test_empty_needs_root_replace(self):
        assert validate_mutation(None, Mutation(1, "wrap_cos")) == "empty_requires_root_replace"

    def test_unknown_op(self):
        assert validate_mutation(None, Mutation(0, "shrink")) == "unknown_op"


class TestDismantle:
    def test_single_leaf(self):
        trace = dismantle(parse_prefix("x0"), 1, np.random.default_rng(0))
        assert len(trace.steps) == 1
        assert trace.steps[0].mutation.op == "root_replace"
        assert replay(trace) == Variable(0)

    def test_two_leaf_sum_both_mirrors(self):
        target = parse_prefix("add x0 x1")
        seen = set()
        for seed in range(40):
            trace = dismantle(target, 1, np.random.default_rng(seed))
            assert len(trace.steps) == 2
            assert replay(trace) == target
            seen.add(trace.steps[1].mutation.op)
        assert seen == {"add_right", "add_left"}

    def test_goal_infinity_single_step(self):
        target = random_expression(7)
        trace = dismantle(target, GOAL_SINGLE_STEP, np.random.default_rng(0))
        assert len(trace.steps) == 1
        assert trace.steps[0].mutation.op == "root_replace"
        assert replay(trace) == target

    def test_known_quotient_expression(self):
        target = parse_prefix("div mul 6.67 mul x1 x2 square x0")
        trace = dismantle(target, 1, np.random.default_rng(3))
        assert replay(trace) == target
        # goal 1 removes one operator per step: operators + final root_replace
        assert len(trace.steps) == 5

    @settings(max_examples=120, deadline=None)
    @given(expr_seeds, st.sampled_from([1, 10, GOAL_SINGLE_STEP]))
    def test_round_trip(self, seed, goal):
        target = random_expression(seed, lo=1, hi=25)
        trace = dismantle(target, goal, np.random.default_rng(seed + 1))
        assert replay(trace) == target

    @settings(max_examples=60, deadline=None)
    @given(expr_seeds)
    def test_intermediates_satisfy_constraints(self, seed):
        target = random_expression(seed, lo=1, hi=25)
        trace = dismantle(target, 10, np.random.default_rng(seed))
        state = None
        for step in trace.steps:
            assert step.state == state
            state = apply_mutation(state, step.mutation)  # would raise on violation
        assert check_constraints(state) is None

    def test_goal_ten_argument_sizes_track_goal(self):
        # arguments of non-final steps should sit at 10 or just above
        sizes = []
        for seed in range(200):
            target = random_expression(seed, d=3, lo=18, hi=25)
            trace = dismantle(target, 10, np.random.default_rng(seed))
            for step in trace.steps[1:]:
                if step.mutation.arg is not None:
                    sizes.append(step.mutation.arg.size)
        assert sizes, "expected some binary steps"
        assert 8 <= float(np.median(sizes)) <= 14


class TestReplay:
    def test_corrupt_trace_raises(self):
        good = dismantle(parse_prefix("add x0 x1"), 1, np.random.default_rng(0))
        from srmcts.mutations import MutationTrace, TraceStep

        broken = MutationTrace(
            (good.steps[0], TraceStep(good.steps[1].state, Mutation(9, "wrap_cos"))),
            good.target,
        )
        with pytest.raises(InvalidMutation):
            replay(broken)

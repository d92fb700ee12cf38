import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srmcts.datagen import Dataset
from srmcts.expressions import Constant, parse_prefix
from srmcts.mutations import Mutation
from srmcts.tokens import (
    SEPARATOR,
    TokenOverflowError,
    decode_float,
    encode_float,
    parse_action,
    tokenize_action,
    tokenize_expression,
    tokenize_state,
    vocabulary,
    write_vocab,
)

# magnitudes representable by the triplet range (exponent of -100 puts the
# smallest encodable value near 1e-97)
finite_floats = st.one_of(
    st.just(0.0),
    st.floats(min_value=1e-96, max_value=1e90),
    st.floats(min_value=-1e90, max_value=-1e-96),
)


class TestFloatTriplets:
    def test_pi_rounding(self):
        assert encode_float(3.14159) == ["+", "3142", "E-3"]

    def test_zero_convention(self):
        assert encode_float(0.0) == ["+", "0", "E0"]

    def test_negative(self):
        sign, mantissa, exponent = encode_float(-2.5)
        assert sign == "-" and decode_float(["-", mantissa, exponent]) == -2.5

    def test_exponent_overflow(self):
        with pytest.raises(TokenOverflowError):
            encode_float(1e120)

    @settings(max_examples=300, deadline=None)
    @given(finite_floats)
    def test_round_trip_four_significant_digits(self, value):
        decoded = decode_float(encode_float(value))
        if value == 0.0:
            assert decoded == 0.0
        else:
            assert abs(decoded - value) <= 5.001e-4 * abs(value)

    @settings(max_examples=200, deadline=None)
    @given(finite_floats)
    def test_re_encoding_is_stable(self, value):
        once = encode_float(value)
        assert encode_float(decode_float(once)) == once


class TestActionTokens:
    def test_binary_with_arg(self):
        m = Mutation(1, "add_right", parse_prefix("x1"))
        assert tokenize_action(m) == ["1", SEPARATOR, "add_right", SEPARATOR, "x1"]

    def test_wrap_without_arg(self):
        m = Mutation(2, "wrap_cos")
        assert tokenize_action(m) == ["2", SEPARATOR, "wrap_cos"]

    def test_round_trip_exact_decimals(self):
        m = Mutation(0, "root_replace", parse_prefix("mul 6.67 x0"))
        assert parse_action(tokenize_action(m)) == m

    def test_round_trip_triplet_mode(self):
        m = Mutation(0, "root_replace", parse_prefix("mul 6.67 x0"))
        recovered = parse_action(tokenize_action(m, float_triplets=True))
        assert recovered.op == m.op and recovered.anchor == m.anchor
        const = recovered.arg.left
        assert isinstance(const, Constant) and const.value == pytest.approx(6.67, rel=5e-4)

    def test_missing_arg_rejected(self):
        with pytest.raises(ValueError):
            parse_action(["1", SEPARATOR, "add_right"])


class TestStateTokens:
    def test_layout_and_cap(self):
        gen = np.random.default_rng(0)
        X = gen.normal(size=(150, 2))
        ds = Dataset(X=X, y=X[:, 0], id="t")
        tokens = tokenize_state(ds, parse_prefix("add x0 x1"))
        sep = tokens.index(SEPARATOR)
        assert tokens[:sep] == ["add", "x0", "x1"]
        # 100-row cap: (2 features + 1 target) triplets per row
        assert len(tokens) - sep - 1 == 100 * 3 * 3

    def test_empty_expression_token(self):
        gen = np.random.default_rng(0)
        ds = Dataset(X=gen.normal(size=(5, 1)), y=np.zeros(5), id="t")
        tokens = tokenize_state(ds, None)
        assert tokens[0] == "nil" and tokens[1] == SEPARATOR


class TestVocabulary:
    def test_stable_and_complete(self, tmp_path):
        vocab = vocabulary()
        assert vocab == vocabulary()
        assert len(vocab) == len(set(vocab))
        n = write_vocab(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text().splitlines()
        assert n == len(vocab) and lines == vocab

    def test_covers_emitted_tokens(self):
        vocab = set(vocabulary())
        gen = np.random.default_rng(1)
        X = gen.normal(size=(30, 3))
        ds = Dataset(X=X, y=X[:, 0] * X[:, 1], id="t")
        expr = parse_prefix("add mul 2.5 x0 cos x2")
        for token in tokenize_state(ds, expr):
            assert token in vocab
        m = Mutation(1, "mul_left", parse_prefix("sub x1 1.5"))
        for token in tokenize_action(m, float_triplets=True):
            assert token in vocab

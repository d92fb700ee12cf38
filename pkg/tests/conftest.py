import numpy as np
import pytest

from srmcts.datagen import Dataset, GenConfig, sample_expression


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def two_var_dataset():
    gen = np.random.default_rng(42)
    X = gen.normal(0.0, 1.5, size=(120, 2))
    return Dataset(X=X, y=X[:, 0] + X[:, 1], id="sum")


def random_expression(seed: int, d: int = 3, lo: int = 1, hi: int = 12):
    """Seeded constraint-satisfying expression, for property tests."""
    cfg = GenConfig(internal_nodes_range=(lo, hi))
    return sample_expression(cfg, d, np.random.default_rng(seed))

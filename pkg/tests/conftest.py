import numpy as np
import pytest

from blipvar.data import ObservedDataset


def make_dataset(n=200, seed=0, p=3, effect=1.0):
    """Small logistic-model dataset used across unit tests."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, p))
    g = 1 / (1 + np.exp(-(0.3 * w[:, 0] - 0.2 * w[:, 1])))
    a = (rng.random(n) < g).astype(float)
    eta = -0.2 + effect * a + 0.5 * w[:, 0] - 0.4 * w[:, 1] + 0.6 * a * w[:, 2]
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return ObservedDataset(w, a, y)


@pytest.fixture
def small_dataset():
    return make_dataset()

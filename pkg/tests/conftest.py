import math

import numpy as np
import pytest

from plnspatial.geometry import Location, Shore
from plnspatial.model import Dataset


def make_locations(coords, shores=None, days=None, julian=None, depth=None):
    n = len(coords)
    shores = shores or ["North"] * n
    days = days or [1] * n
    julian = julian or [10 * d for d in days]
    depth = depth if depth is not None else [1.0 + 0.1 * i for i in range(n)]
    return tuple(
        Location(i + 1, float(x), float(y), Shore.parse(s), float(q), int(d), int(j))
        for i, ((x, y), s, d, j, q) in enumerate(zip(coords, shores, days, julian, depth))
    )


def make_dataset(counts, X, coords, **kw):
    X = np.asarray(X, dtype=float)
    return Dataset(np.asarray(counts), X.reshape(len(counts), -1), make_locations(coords, **kw))


@pytest.fixture
def two_shore_data():
    """Twelve sites, six per shore, three days."""
    rng = np.random.default_rng(5)
    n = 12
    t = np.linspace(0.2, 2.9, 6)
    north = np.column_stack([1000 * np.cos(t), 400 + 300 * np.sin(t)])
    south = np.column_stack([1000 * np.cos(t), -400 - 300 * np.sin(t)])
    coords = np.vstack([north, south])
    shores = ["North"] * 6 + ["South"] * 6
    days = [1, 1, 1, 3, 3, 3, 2, 2, 2, 2, 2, 2]
    X = rng.standard_normal((n, 2))
    y = rng.poisson(np.exp(1.0 + 0.3 * X[:, 0]))
    return make_dataset(y, X, coords, shores=shores, days=days)


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)


PI = math.pi

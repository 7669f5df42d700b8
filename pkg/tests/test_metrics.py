import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdmf.errors import DimensionError
from qdmf.metrics import energy_distance


def brute_energy(x, y):
    def avg(a, b):
        return sum(np.hypot(*(p - q)) for p in a for q in b) / (len(a) * len(b))
    return 2 * avg(x, y) - avg(x, x) - avg(y, y)


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((7, 2)), rng.standard_normal((5, 2)) + 1
    assert energy_distance(x, y) == pytest.approx(brute_energy(x, y), rel=1e-12)


def test_point_masses():
    # |a - b| = 5: 2*5 - 0 - 0
    assert energy_distance([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(10.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**16))
def test_properties(n, m, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, 2)), rng.standard_normal((m, 2))
    d = energy_distance(x, y)
    assert d >= -1e-12
    assert d == pytest.approx(energy_distance(y, x), abs=1e-12)
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)


def test_shape_errors():
    with pytest.raises(DimensionError):
        energy_distance(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        energy_distance(np.zeros((0, 2)), np.zeros((3, 2)))

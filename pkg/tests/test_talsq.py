import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdmf.errors import ConfigurationError, DomainError
from qdmf.quant import QuantSpec, fake_quant
from qdmf.talsq import TemporalScaleTable, calibrate_table, interpolate, scale_at
from qdmf.tensor import Adam, Tensor
from qdmf.tensor import sum as tsum

tables = st.lists(st.floats(1e-4, 10.0), min_size=2, max_size=40)


def test_lookup():
    table = TemporalScaleTable([0.1, 0.2, 0.3])
    assert scale_at(table, 1).item() == 0.2
    with pytest.raises(IndexError):
        table.scale_at(3)
    with pytest.raises(IndexError):
        table.scale_at(-1)


def test_rejects_nonpositive():
    with pytest.raises(DomainError):
        TemporalScaleTable([0.1, 0.0])


def test_parameter_count():
    assert TemporalScaleTable(np.ones(100)).num_parameters() == 100
    assert TemporalScaleTable([0.5], shared=True).num_parameters() == 1


def test_shared_serves_every_step():
    table = TemporalScaleTable([0.5], shared=True)
    assert table.scale_at(0) is table.scale_at(99)


def test_interpolate_midpoint():
    out = interpolate(TemporalScaleTable([0.1, 0.3]), 3).values
    np.testing.assert_allclose(out, [0.1, 0.2, 0.3], rtol=1e-15)


def test_interpolate_needs_two_steps():
    with pytest.raises(ConfigurationError):
        interpolate(TemporalScaleTable([0.1, 0.3]), 1)


def test_interpolate_identity_is_bit_exact():
    vals = np.random.default_rng(0).uniform(0.01, 1.0, 100)
    assert np.array_equal(interpolate(TemporalScaleTable(vals), 100).values, vals)


@settings(max_examples=100)
@given(tables, st.integers(2, 120))
def test_interpolate_endpoints_and_bounds(vals, T_infer):
    src = np.array(vals)
    out = interpolate(TemporalScaleTable(src), T_infer).values
    assert out.size == T_infer
    assert out[0] == src[0] and out[-1] == src[-1]
    assert out.min() >= src.min() and out.max() <= src.max()
    assert np.all(out > 0)


@settings(max_examples=50)
@given(tables, st.integers(2, 120))
def test_interpolate_monotone(vals, T_infer):
    src = np.sort(np.array(vals))
    out = interpolate(TemporalScaleTable(src), T_infer).values
    assert np.all(np.diff(out) >= 0)


def test_interpolate_matches_np_interp():
    src = np.random.default_rng(1).uniform(0.1, 1.0, 100)
    out = interpolate(TemporalScaleTable(src), 20).values
    ref = np.interp(np.arange(20) * 99 / 19, np.arange(100), src)
    np.testing.assert_allclose(out, ref, rtol=1e-14)


def test_step_gradient_isolation():
    table = TemporalScaleTable(np.full(10, 0.1))
    before = table.values.copy()
    opt = Adam(table.params, lr=1e-2)
    x = Tensor(np.random.default_rng(2).normal(0, 0.5, 32))
    for _ in range(5):
        opt.zero_grad()
        tsum(fake_quant(x, table.scale_at(4), QuantSpec(4))).backward()
        opt.step()
    after = table.values
    changed = np.flatnonzero(after != before)
    assert list(changed) == [4]


def test_calibrate_per_step_ranges():
    spec = QuantSpec(8)
    rng = np.random.default_rng(3)
    ranges = [0.5, 1.0, 4.0]
    acts = [rng.uniform(-r, r, 5000) for r in ranges]
    table = calibrate_table(acts, spec)
    for s, a in zip(table.values, acts):
        base = np.abs(a).max() / spec.u
        assert 0.2 * base <= s <= 1.2 * base
        # uniform data: the MSE optimum sits close to range/u
        assert abs(s - base) / base < 0.1


def test_calibrate_shared_pools():
    acts = [np.array([1.0, -1.0]), np.array([3.0, -3.0])]
    table = calibrate_table(acts, QuantSpec(4), shared=True)
    assert table.shared and table.T_train == 1


def test_copy_is_independent():
    table = TemporalScaleTable([0.1, 0.2])
    dup = table.copy()
    dup.params[0].data[0] = 5.0
    assert table.values[0] == 0.1

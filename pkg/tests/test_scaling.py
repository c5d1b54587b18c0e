import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from anyq.core import Granularity, GranularityKind, NonFiniteError, ShapeError
from anyq.scaling import ScaleSet, compute_scales, dequantize, group_count, group_index, scale_weights


def test_asymmetric_row_example():
    s = compute_scales([[0, 1, 2, 3]], Granularity.rowwise(), False, -8, 7)
    assert s.alphas[0] == np.float32(0.2) and s.betas[0] == 0
    assert np.allclose(scale_weights([[0, 1, 2, 3]], s), [[0, 5, 10, 15]], atol=1e-5)


def test_symmetric_row_example():
    s = compute_scales([[-4, 4]], Granularity.rowwise(), True, -8, 7)
    assert s.alphas[0] == np.float32(4) / np.float32(7)
    assert s.betas[0] == 0


def test_constant_group_is_lossless():
    w = [[5, 5, 5, 5]]
    s = compute_scales(w, Granularity.rowwise(), False, -8, 7)
    assert s.alphas[0] == 1.0 and s.betas[0] == 5.0
    ws = scale_weights(w, s)
    assert np.all(ws == 0)
    assert np.array_equal(dequantize(ws, s), np.asarray(w, dtype=np.float32))


def test_zero_group_symmetric():
    s = compute_scales(np.zeros((2, 4)), Granularity.rowwise(), True, -8, 7)
    assert np.all(s.alphas == 1.0) and np.all(s.betas == 0)


def test_dequantize_inverse_example():
    s = ScaleSet((1, 4), Granularity.rowwise(), False, np.array([0.2], np.float32), np.zeros(1, np.float32))
    assert np.allclose(dequantize([[0, 5, 10, 15]], s), [[0, 1, 2, 3]], atol=1e-6)


def test_identity_scaling():
    w = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    s = ScaleSet((3, 5), Granularity.rowwise(), False, np.ones(3, np.float32), np.zeros(3, np.float32))
    assert np.array_equal(scale_weights(w, s), w)
    assert np.array_equal(dequantize(w, s), w)


def test_group_index_layouts():
    shape = (4, 10)
    g = group_index(shape, Granularity.groupwise(4))
    assert g[0].tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    assert g[1, 0] == 3
    assert group_count(shape, Granularity.groupwise(4)) == 12
    b = group_index(shape, Granularity.blockwise(3))
    assert b[0, 0] == 0 and b[2, 9] == 3 and b[3, 0] == 4
    assert group_count(shape, Granularity.blockwise(3)) == 8
    assert np.all(group_index(shape, Granularity.tensorwise()) == 0)
    assert np.array_equal(group_index(shape, Granularity.columnwise())[2], np.arange(10))


@pytest.mark.parametrize(
    "gran",
    [Granularity.tensorwise(), Granularity.rowwise(), Granularity.columnwise(), Granularity.groupwise(3), Granularity.blockwise(2)],
)
def test_groups_cover_every_element(gran):
    idx = group_index((5, 7), gran)
    counts = np.bincount(idx.ravel(), minlength=group_count((5, 7), gran))
    assert counts.sum() == 35 and np.all(counts > 0)


def test_groupwise_full_width_equals_rowwise():
    w = np.random.default_rng(1).standard_normal((6, 32)).astype(np.float32)
    a = compute_scales(w, Granularity.groupwise(32), False, -8, 7)
    b = compute_scales(w, Granularity.rowwise(), False, -8, 7)
    assert np.array_equal(a.alphas, b.alphas) and np.array_equal(a.betas, b.betas)
    assert np.array_equal(scale_weights(w, a), scale_weights(w, b))


def test_tensorwise_equals_covering_block():
    w = np.random.default_rng(2).standard_normal((6, 9)).astype(np.float32)
    a = compute_scales(w, Granularity.tensorwise(), True, -8, 7)
    b = compute_scales(w, Granularity.blockwise(9), True, -8, 7)
    assert np.array_equal(a.alphas, b.alphas)


def test_errors():
    with pytest.raises(NonFiniteError):
        compute_scales([[np.nan, 1]], Granularity.rowwise(), False, -8, 7)
    with pytest.raises(ValueError):
        compute_scales([[0, 1]], Granularity.rowwise(), False, 7, 7)
    s = compute_scales(np.ones((2, 4)), Granularity.rowwise(), False, -8, 7)
    with pytest.raises(ShapeError):
        scale_weights(np.ones((2, 5)), s)
    with pytest.raises(ShapeError):
        ScaleSet((2, 4), Granularity.rowwise(), False, np.ones(3, np.float32), np.zeros(3, np.float32))


grans = st.sampled_from(
    [Granularity.tensorwise(), Granularity.rowwise(), Granularity.columnwise(), Granularity.groupwise(2),
     Granularity.groupwise(5), Granularity.blockwise(3)]
)
mats = st.tuples(st.integers(1, 6), st.integers(1, 12)).flatmap(
    lambda s: arrays(np.float32, s, elements=st.floats(-100, 100, width=32))
)


@given(mats, grans, st.booleans())
def test_round_trip_and_range(w, gran, symmetric):
    s = compute_scales(w, gran, symmetric, -8, 7)
    assert np.all(s.alphas > 0)
    if symmetric:
        assert np.all(s.betas == 0)
    ws = scale_weights(w, s)
    if symmetric:
        assert np.all(np.abs(ws) <= 7 * (1 + 1e-6))
    else:
        assert np.all(ws >= 0) and np.all(ws <= 15 * (1 + 1e-6))
    back = dequantize(ws, s)
    assert np.allclose(back, w, rtol=1e-5, atol=1e-5 * max(1.0, float(np.abs(w).max())))


@given(mats, st.integers(-64, 64))
def test_shift_invariance(w, shift):
    # values on a coarse dyadic grid keep the shifted arithmetic exact
    w = np.round(w * 4) / 4
    gran = Granularity.rowwise()
    s0 = compute_scales(w, gran, False, -8, 7)
    w1 = (w + np.float32(shift / 4)).astype(np.float32)
    s1 = compute_scales(w1, gran, False, -8, 7)
    assert np.array_equal(s0.alphas, s1.alphas)
    assert np.array_equal(s1.betas, s0.betas + np.float32(shift / 4))
    assert np.array_equal(scale_weights(w, s0), scale_weights(w1, s1))


@given(mats, st.sampled_from([0.5, 2.0, 3.0, 0.1]), st.booleans())
def test_scale_invariance(w, c, symmetric):
    gran = Granularity.rowwise()
    s0 = compute_scales(w, gran, symmetric, -8, 7)
    s1 = compute_scales(w * np.float32(c), gran, symmetric, -8, 7)
    a, b = scale_weights(w, s0), scale_weights(w * np.float32(c), s1)
    degenerate = (s0.alphas == 1.0)[s0.index] | (s1.alphas == 1.0)[s1.index]
    assert np.allclose(a[~degenerate], b[~degenerate], rtol=1e-6, atol=1e-5)


def test_blockwise_kind():
    assert Granularity.blockwise(2).kind is GranularityKind.BLOCK

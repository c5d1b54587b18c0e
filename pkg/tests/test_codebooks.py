import statistics

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from anyq.codebooks import (
    NF4_QUANTILE_OFFSET,
    NF4_VALUES,
    Codebook,
    codebook_for,
    fp4_table,
    int_grid,
    lut_overhead_bits,
    nf4_table,
    round_to_codebook,
    scaled_domain_table,
    storage_bits_per_entry,
)
from anyq.core import CodebookKind, ConfigError, format_config


def nf4_oracle_scipy(offset=NF4_QUANTILE_OFFSET):
    pos = norm.ppf(np.linspace(offset, 0.5, 9)[:-1]).tolist()
    neg = (-norm.ppf(np.linspace(offset, 0.5, 8)[:-1])).tolist()
    v = np.array(sorted(pos + [0.0] + neg))
    return v / np.abs(v).max()


def nf4_oracle_stdlib(offset=NF4_QUANTILE_OFFSET):
    nd = statistics.NormalDist()
    ps = [offset + (0.5 - offset) * i / 8 for i in range(8)]
    ns = [offset + (0.5 - offset) * i / 7 for i in range(7)]
    v = sorted([nd.inv_cdf(p) for p in ps] + [0.0] + [-nd.inv_cdf(p) for p in ns])
    top = max(abs(x) for x in v)
    return np.array([x / top for x in v])


def e2m1_oracle():
    # enumerate all 16 sign/exponent/mantissa bit patterns (bias 1, subnormal at e=0)
    vals = set()
    for code in range(16):
        sign, exp, man = code >> 3, (code >> 1) & 3, code & 1
        mag = man * 0.5 if exp == 0 else (1 + man / 2) * 2.0 ** (exp - 1)
        vals.add(-mag if sign else mag)
    return sorted(vals)


def test_int_grids():
    assert int_grid(4).values.tolist() == list(range(-8, 8))
    assert int_grid(2).values.tolist() == [-2, -1, 0, 1]
    g8 = int_grid(8)
    assert g8.qmin == -128 and g8.qmax == 127 and len(g8) == 256
    assert int_grid(4, shifted=True).values.tolist() == list(range(-7, 9))
    assert np.all(np.diff(int_grid(3).values) == 1)
    with pytest.raises(ConfigError):
        int_grid(5)


def test_fp4_matches_enumeration():
    t = fp4_table()
    assert t.values.tolist() == e2m1_oracle()
    assert t.qmax == 6.0 and t.qmin == -6.0
    assert len(t) == 15
    assert np.count_nonzero(t.values == 0) == 1


def test_nf4_matches_both_oracles():
    t = nf4_table().values.astype(np.float64)
    assert np.allclose(t, nf4_oracle_scipy(), atol=1e-6)
    assert np.allclose(t, nf4_oracle_stdlib(), atol=1e-6)
    assert np.allclose(nf4_oracle_scipy(), nf4_oracle_stdlib(), atol=1e-9)


def test_nf4_shape():
    v = np.array(NF4_VALUES)
    assert v[0] == -1.0 and v[-1] == 1.0
    assert np.count_nonzero(v == 0) == 1
    assert np.count_nonzero(v < 0) == 7 and np.count_nonzero(v > 0) == 8


def test_codebook_validation():
    with pytest.raises(ConfigError):
        Codebook(CodebookKind.INT, 2, np.array([0, 0, 1], np.float32))
    with pytest.raises(ConfigError):
        Codebook(CodebookKind.INT, 2, np.arange(5, dtype=np.float32))


def test_round_examples():
    g = int_grid(4)
    codes = round_to_codebook([0.4, 0.6], g)
    assert g.values[codes].tolist() == [0, 1]
    # exact midpoint goes to the smaller index
    assert g.values[round_to_codebook([0.5, -0.5], g)].tolist() == [0, -1]
    assert np.array_equal(round_to_codebook(g.values, g), np.arange(16))
    # clamping
    assert round_to_codebook([-100, 100], g).tolist() == [0, 15]


def test_round_rejects_non_finite():
    with pytest.raises(ValueError):
        round_to_codebook([np.nan], int_grid(4))


def test_scaled_domain_table():
    asym = scaled_domain_table(format_config("int4"))
    assert asym.values.tolist() == list(range(16))
    sym = scaled_domain_table(format_config("int4", symmetric=True))
    assert sym == int_grid(4)
    assert codebook_for(format_config("nf4")) == nf4_table()
    assert codebook_for(format_config("any4")) == int_grid(4)


tables = st.sampled_from([int_grid(2), int_grid(4), fp4_table(), nf4_table(), int_grid(3)])
floats = arrays(np.float32, st.integers(1, 64), elements=st.floats(-10, 10, width=32))


@given(floats, tables)
def test_rounding_properties(x, cb):
    codes = round_to_codebook(x, cb)
    v = cb.values
    # nearest by absolute distance, ties to the smaller index
    d = np.abs(x[:, None].astype(np.float64) - v[None, :].astype(np.float64))
    assert np.array_equal(codes, np.argmin(d, axis=1))
    # idempotent
    assert np.array_equal(round_to_codebook(v[codes], cb), codes)
    # monotone
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(codes[order].astype(int)) >= 0)
    inside = (x >= cb.qmin) & (x <= cb.qmax)
    assert np.all(np.abs(x - v[codes])[inside] <= np.max(np.diff(v)) / 2 + 1e-6)


def test_bits_accounting():
    assert storage_bits_per_entry(format_config("any4"), 4096, 4096) == 4.3125
    assert storage_bits_per_entry(format_config("int4"), 4096, 4096) == 4.25
    assert storage_bits_per_entry(format_config("nf4"), 1, 4096) == 4.25
    assert lut_overhead_bits(4, 4096) == 0.0625
    assert storage_bits_per_entry(format_config("int4", symmetric=True), 8, 4096) == 4.125
    assert storage_bits_per_entry(format_config("any2", None), 2, 64) == 2 + 32 / 64 + 4 * 16 / 64
    with pytest.raises(ValueError):
        storage_bits_per_entry(format_config("any4"), 0, 4)


def test_to_dict():
    d = fp4_table().to_dict()
    assert d["kind"] == "fp4" and d["qmax"] == 6.0 and len(d["values"]) == 15

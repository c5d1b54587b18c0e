"""Fixed dequantization tables (int grid, fp4, nf4) and nearest-value rounding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CodebookKind,
    ConfigError,
    QuantConfig,
    SUPPORTED_BITS,
)
from .scaling import group_count

# NormalFloat4: standard-normal quantiles at linspace(0.9677083, 0.5, 9)[:-1]
# (positive side) and linspace(0.9677083, 0.5, 8)[:-1] (negative side), plus an
# exact zero, normalized so the extremes are -1 and +1.
NF4_VALUES = (
    -1.0,
    -0.6961928906037204,
    -0.5250730386952294,
    -0.39491749069931,
    -0.2844413576181077,
    -0.18477343519288886,
    -0.09104999214427932,
    0.0,
    0.07958032909416937,
    0.1609301727049362,
    0.24611229392993592,
    0.33791519352165506,
    0.4407098024131903,
    0.5626169700752374,
    0.7229567278928825,
    1.0,
)
NF4_QUANTILE_OFFSET = 0.9677083


@dataclass(frozen=True, eq=False)
class Codebook:
    """Sorted table of dequantization values indexed by code."""

    kind: CodebookKind
    bits: int
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 1 or len(v) == 0 or len(v) > (1 << self.bits):
            raise ConfigError(f"codebook needs 1..{1 << self.bits} values, got shape {v.shape}")
        if np.any(np.diff(v) <= 0):
            raise ConfigError("codebook values must be strictly increasing")

    @property
    def qmin(self) -> float:
        return float(self.values[0])

    @property
    def qmax(self) -> float:
        return float(self.values[-1])

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.kind == other.kind and self.bits == other.bits and np.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "bits": self.bits,
            "qmin": self.qmin,
            "qmax": self.qmax,
            "values": [float(x) for x in self.values],
        }


def int_grid(bits: int, shifted: bool = False) -> Codebook:
    """Consecutive integers ``[-2^(n-1), 2^(n-1) - 1]``; ``shifted`` moves the grid up by one."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit width {bits}")
    lo = -(1 << (bits - 1)) + (1 if shifted else 0)
    return Codebook(CodebookKind.INT, bits, np.arange(lo, lo + (1 << bits), dtype=np.float32))


def fp4_table() -> Codebook:
    """E2M1 values with the two zero encodings merged: 15 entries in [-6, 6].

    Code 15 is left unused, so a 4-bit code space holds the table with one
    spare code.
    """
    mags = []
    for e in range(4):
        for m in range(2):
            # exponent bias 1; e == 0 is subnormal
            mags.append(m * 0.5 if e == 0 else (1 + m * 0.5) * 2.0 ** (e - 1))
    pos = sorted(set(mags))
    vals = [-x for x in reversed(pos) if x != 0] + pos
    return Codebook(CodebookKind.FP4, 4, np.array(vals, dtype=np.float32))


def nf4_table() -> Codebook:
    return Codebook(CodebookKind.NF4, 4, np.array(NF4_VALUES, dtype=np.float32))


def codebook_for(cfg: QuantConfig) -> Codebook:
    """Fixed table used by ``cfg``; for learned formats this is the int grid
    whose range defines the scaled domain."""
    if cfg.codebook is CodebookKind.FP4:
        return fp4_table()
    if cfg.codebook is CodebookKind.NF4:
        return nf4_table()
    return int_grid(cfg.bits, shifted=cfg.int_range == "shifted")


def scaled_domain_table(cfg: QuantConfig) -> Codebook:
    """Table that scaled weights are rounded against.

    Asymmetric scaling maps a group's minimum to 0 and its maximum to
    ``qmax - qmin``, so the table is translated by ``-qmin``; symmetric
    scaling uses the table as is.
    """
    cb = codebook_for(cfg)
    if cfg.symmetric:
        return cb
    return Codebook(cb.kind, cb.bits, (cb.values - np.float32(cb.qmin)).astype(np.float32))


def round_to_codebook(ws, values) -> np.ndarray:
    """Index of the nearest entry of the sorted ``values`` for every element.

    Exact midpoints go to the smaller index; values outside the table clamp
    to the end codes. Returns uint8 codes with the shape of ``ws``.
    """
    if isinstance(values, Codebook):
        values = values.values
    table = np.asarray(values, dtype=np.float32).astype(np.float64)
    x = np.asarray(ws, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot round non-finite values")
    # midpoints of adjacent float32 values are exact in float64
    mids = (table[:-1] + table[1:]) * 0.5
    codes = np.searchsorted(mids, x.astype(np.float64), side="left")
    return codes.astype(np.uint8 if len(table) <= 256 else np.int64)


def _scale_bits(cfg: QuantConfig) -> int:
    per_value = 32 if cfg.scale_dtype == "fp32" else 16
    return per_value if cfg.symmetric else 2 * per_value


def storage_bits_per_entry(cfg: QuantConfig, n: int, k: int) -> float:
    """Amortized storage bits per weight: codes + group scale metadata + LUTs.

    Each group stores a 16-bit scale and (asymmetric only) a 16-bit zero
    point; learned formats add ``2^n`` 16-bit LUT entries per row. Fixed
    codebooks cost nothing beyond an id in the header.
    """
    if n < 1 or k < 1:
        raise ValueError("matrix dimensions must be positive")
    scale = group_count((n, k), cfg.granularity) * _scale_bits(cfg) / (n * k)
    lut = (1 << cfg.bits) * 16 / k if cfg.codebook is CodebookKind.ANY else 0.0
    return cfg.bits + scale + lut


def lut_overhead_bits(bits: int, k: int) -> float:
    return (1 << bits) * 16 / k


__all__ = [
    "Codebook",
    "NF4_VALUES",
    "codebook_for",
    "fp4_table",
    "int_grid",
    "lut_overhead_bits",
    "nf4_table",
    "round_to_codebook",
    "scaled_domain_table",
    "storage_bits_per_entry",
]

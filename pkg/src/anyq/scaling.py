"""Affine scale/offset parameters at any granularity.

A weight ``w`` in group ``G`` maps to the scaled domain as
``(w - beta_G) / alpha_G`` and back as ``alpha_G * v + beta_G``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import Granularity, GranularityKind, ShapeError, as_matrix


def group_count(shape: tuple[int, int], gran: Granularity) -> int:
    n, k = shape
    kind = gran.kind
    if kind is GranularityKind.TENSOR:
        return 1
    if kind is GranularityKind.ROW:
        return n
    if kind is GranularityKind.COLUMN:
        return k
    if kind is GranularityKind.GROUP:
        return n * -(-k // gran.size)
    return -(-n // gran.size) * -(-k // gran.size)


def group_index(shape: tuple[int, int], gran: Granularity) -> np.ndarray:
    """Return an int64 ``(N, K)`` array mapping each element to its group id.

    Groupwise groups are runs of ``g`` consecutive columns within a row; the
    last run of a row is shorter when ``g`` does not divide ``K``. Blockwise
    tiles are numbered row-major over the tile grid.
    """
    n, k = shape
    rows = np.arange(n, dtype=np.int64)[:, None]
    cols = np.arange(k, dtype=np.int64)[None, :]
    kind = gran.kind
    if kind is GranularityKind.TENSOR:
        idx = np.zeros((n, k), dtype=np.int64)
    elif kind is GranularityKind.ROW:
        idx = np.broadcast_to(rows, (n, k))
    elif kind is GranularityKind.COLUMN:
        idx = np.broadcast_to(cols, (n, k))
    elif kind is GranularityKind.GROUP:
        per_row = -(-k // gran.size)
        idx = rows * per_row + cols // gran.size
    else:
        b = gran.size
        idx = (rows // b) * -(-k // b) + cols // b
    return np.ascontiguousarray(idx)


@dataclass(frozen=True, eq=False)
class ScaleSet:
    shape: tuple[int, int]
    granularity: Granularity
    symmetric: bool
    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        expected = group_count(self.shape, self.granularity)
        if self.alphas.shape != (expected,) or self.betas.shape != (expected,):
            raise ShapeError(
                f"expected {expected} groups for {self.granularity} on {self.shape}, "
                f"got alphas {self.alphas.shape}, betas {self.betas.shape}"
            )

    @cached_property
    def index(self) -> np.ndarray:
        return group_index(self.shape, self.granularity)

    def group_of(self, i: int, j: int) -> int:
        return int(self.index[i, j])

    def alpha_map(self) -> np.ndarray:
        """Per-element alpha, shape ``(N, K)``."""
        return self.alphas[self.index]

    def beta_map(self) -> np.ndarray:
        return self.betas[self.index]

    def __eq__(self, other):
        if not isinstance(other, ScaleSet):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.granularity == other.granularity
            and self.symmetric == other.symmetric
            and np.array_equal(self.alphas, other.alphas)
            and np.array_equal(self.betas, other.betas)
        )


def compute_scales(w, granularity: Granularity, symmetric: bool, qmin: float, qmax: float) -> ScaleSet:
    """Min/max (asymmetric) or absmax (symmetric) scales for every group.

    A group whose range is zero gets ``alpha = 1`` so that its scaled values
    are all zero and the group reconstructs exactly from ``beta``.
    """
    w = as_matrix(w, "weights")
    if not qmax > qmin:
        raise ValueError(f"qmax ({qmax}) must exceed qmin ({qmin})")
    if symmetric and not qmax > 0:
        raise ValueError(f"symmetric scaling needs qmax > 0, got {qmax}")
    idx = group_index(w.shape, granularity)
    ng = group_count(w.shape, granularity)
    flat_idx = idx.ravel()
    flat = w.ravel()

    if symmetric:
        amax = np.zeros(ng, dtype=np.float32)
        np.maximum.at(amax, flat_idx, np.abs(flat))
        alphas = amax / np.float32(qmax)
        betas = np.zeros(ng, dtype=np.float32)
    else:
        gmin = np.full(ng, np.inf, dtype=np.float32)
        gmax = np.full(ng, -np.inf, dtype=np.float32)
        np.minimum.at(gmin, flat_idx, flat)
        np.maximum.at(gmax, flat_idx, flat)
        alphas = (gmax - gmin) / np.float32(qmax - qmin)
        betas = gmin
    # zero range, or a range so small the division underflowed
    alphas = np.where(alphas > 0, alphas, np.float32(1.0)).astype(np.float32)
    return ScaleSet(w.shape, granularity, symmetric, alphas, betas.astype(np.float32))


def _check_shape(m: np.ndarray, s: ScaleSet):
    if m.shape != tuple(s.shape):
        raise ShapeError(f"matrix shape {m.shape} does not match scale set shape {s.shape}")


def scale_weights(w, s: ScaleSet) -> np.ndarray:
    w = as_matrix(w, "weights")
    _check_shape(w, s)
    return ((w - s.beta_map()) / s.alpha_map()).astype(np.float32)


def dequantize(values, s: ScaleSet) -> np.ndarray:
    """``alpha * v + beta`` per element, in float32.

    ``values`` are already-decoded codebook/LUT values; use
    :meth:`anyq.pack.QuantizedTensor.dequantize` to go from codes.
    """
    v = np.asarray(values, dtype=np.float32)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    _check_shape(v, s)
    return (s.alpha_map() * v + s.beta_map()).astype(np.float32)

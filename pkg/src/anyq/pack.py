"""Quantized tensor container, bit packing, 16-bit narrowing and the ANYQ file format.

ANYQ layout (all little-endian)::

    header   fixed-size struct, see ``_HEADER``
    codes    N rows, each ceil(K * bits / 8) bytes, codes in layout order,
             LSB-first bit stream, row tail padded with zero bits
    luts     N * 2^bits 16-bit values (learned formats only)
    alphas   one scale per group (fp16/bf16/fp32)
    betas    one offset per group, omitted for symmetric scaling

The payload sections are contiguous and the file ends exactly at the end of
the last section, so ``8 * (file_size - header_size) / (N * K)`` is the
storage cost per weight.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .codebooks import Codebook, codebook_for, scaled_domain_table
from .core import (
    AnyqError,
    CodebookKind,
    ConfigError,
    Granularity,
    GranularityKind,
    Init,
    LearnerConfig,
    QuantConfig,
    ShapeError,
    Weighting,
)
from .scaling import ScaleSet, group_count


class FormatError(AnyqError):
    """Malformed ANYQ data."""


class MagicMismatch(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class Truncated(FormatError):
    pass


class InvariantViolation(FormatError):
    pass


class BadCode(InvariantViolation):
    """A code does not index a valid table entry."""


class NarrowingError(AnyqError, ValueError):
    pass


# -- layout -------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """``row``: codes in logical row-major order. ``ktiled``: within each row,
    the codes at offset ``j`` of every ``tile_k``-wide k-tile are stored next
    to each other (k-tile packing), so position ``j`` of consecutive tiles can
    be fetched with one wide load. ``tile_k == 1`` is the identity.
    """

    kind: str = "row"
    tile_k: int = 1

    def __post_init__(self):
        if self.kind not in ("row", "ktiled"):
            raise ConfigError(f"unknown layout {self.kind!r}")
        if self.tile_k < 1:
            raise ConfigError(f"tile_k must be >= 1, got {self.tile_k}")
        if self.kind == "row" and self.tile_k != 1:
            raise ConfigError("row layout has no tile size")

    def __str__(self) -> str:
        return "row" if self.kind == "row" else f"ktiled:{self.tile_k}"


ROW_MAJOR = Layout()


def ktile_order(k: int, tile_k: int) -> np.ndarray:
    """Logical k index stored at each physical position of a k-tiled row.

    Positions are sorted by (offset within tile, tile index); a ragged last
    tile simply contributes fewer offsets.
    """
    ks = np.arange(k, dtype=np.int64)
    return np.lexsort((ks // tile_k, ks % tile_k))


# -- tensor -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Codes plus everything needed to decode them.

    ``codes`` is a uint8 ``(N, K)`` array in ``layout`` order. ``luts`` holds
    one sorted row of ``2^bits`` scaled-domain values per weight row for
    learned formats and is ``None`` for fixed codebooks.
    """

    shape: tuple[int, int]
    cfg: QuantConfig
    codes: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    luts: Optional[np.ndarray] = None
    layout: Layout = ROW_MAJOR

    def __post_init__(self):
        n, k = self.shape
        cfg = self.cfg
        if self.codes.shape != (n, k) or self.codes.dtype != np.uint8:
            raise InvariantViolation(f"codes must be uint8 {self.shape}, got {self.codes.dtype} {self.codes.shape}")
        ng = group_count(self.shape, cfg.granularity)
        if self.alphas.shape != (ng,) or self.betas.shape != (ng,):
            raise InvariantViolation(f"expected {ng} scale groups")
        if not (np.all(np.isfinite(self.alphas)) and np.all(self.alphas > 0)):
            raise InvariantViolation("group scales must be finite and positive")
        if not np.all(np.isfinite(self.betas)):
            raise InvariantViolation("group offsets must be finite")
        if cfg.symmetric and np.any(self.betas != 0):
            raise InvariantViolation("symmetric scaling requires zero offsets")
        if cfg.codebook is CodebookKind.ANY:
            if cfg.granularity.kind not in (GranularityKind.ROW, GranularityKind.GROUP):
                raise InvariantViolation("learned LUTs need rowwise or groupwise scaling")
            if self.luts is None or self.luts.shape != (n, cfg.levels):
                raise InvariantViolation(f"learned format needs luts of shape {(n, cfg.levels)}")
            if not np.all(np.isfinite(self.luts)) or np.any(np.diff(self.luts, axis=1) < 0):
                raise InvariantViolation("row LUTs must be finite and sorted")
            limit = cfg.levels
        else:
            if self.luts is not None:
                raise InvariantViolation("fixed codebooks carry no per-row LUT")
            limit = len(codebook_for(cfg))
        if self.codes.size and int(self.codes.max()) >= limit:
            raise BadCode(f"code {int(self.codes.max())} out of range for {limit}-entry table")

    @property
    def scales(self) -> ScaleSet:
        return ScaleSet(self.shape, self.cfg.granularity, self.cfg.symmetric, self.alphas, self.betas)

    @property
    def codebook(self) -> Optional[Codebook]:
        """Scaled-domain table for fixed formats, ``None`` for learned ones."""
        return None if self.cfg.codebook is CodebookKind.ANY else scaled_domain_table(self.cfg)

    def logical_codes(self) -> np.ndarray:
        if self.layout.kind == "row":
            return self.codes
        out = np.empty_like(self.codes)
        out[:, ktile_order(self.shape[1], self.layout.tile_k)] = self.codes
        return out

    def values(self) -> np.ndarray:
        """Scaled-domain value of every element (codebook or row-LUT lookup)."""
        codes = self.logical_codes()
        if self.luts is not None:
            return np.take_along_axis(self.luts, codes.astype(np.intp), axis=1)
        return self.codebook.values[codes]

    def dequantize(self) -> np.ndarray:
        s = self.scales
        return (s.alpha_map() * self.values() + s.beta_map()).astype(np.float32)

    def narrowed(self) -> "QuantizedTensor":
        """Copy whose LUTs and scales hold exactly the values a file stores."""
        cfg = self.cfg
        luts = None if self.luts is None else widen(narrow(self.luts, cfg.lut_dtype), cfg.lut_dtype)
        alphas = _round_trip_scales(self.alphas, cfg.scale_dtype)
        if np.any(alphas <= 0):
            raise NarrowingError(f"a group scale underflows {cfg.scale_dtype}; store scales as fp32")
        betas = _round_trip_scales(self.betas, cfg.scale_dtype)
        return replace(self, luts=luts, alphas=alphas, betas=betas)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        luts_equal = (self.luts is None and other.luts is None) or (
            self.luts is not None and other.luts is not None and np.array_equal(self.luts, other.luts)
        )
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.cfg == other.cfg
            and self.layout == other.layout
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.alphas, other.alphas)
            and np.array_equal(self.betas, other.betas)
            and luts_equal
        )


def to_ktiled(qt: QuantizedTensor, tile_k: int) -> QuantizedTensor:
    if tile_k < 1:
        raise ConfigError(f"tile_k must be >= 1, got {tile_k}")
    logical = qt.logical_codes()
    codes = np.ascontiguousarray(logical[:, ktile_order(qt.shape[1], tile_k)])
    return replace(qt, codes=codes, layout=Layout("ktiled", tile_k))


def from_ktiled(qt: QuantizedTensor) -> QuantizedTensor:
    return replace(qt, codes=np.ascontiguousarray(qt.logical_codes()), layout=ROW_MAJOR)


# -- bit packing --------------------------------------------------------------


def row_bytes(k: int, bits: int) -> int:
    return -(-k * bits // 8)


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack an ``(N, K)`` code matrix into ``(N, ceil(K*bits/8))`` bytes.

    Each row is an LSB-first bit stream: for 4-bit codes the first code of a
    pair sits in the low nibble. Rows are padded with zero bits to a byte
    boundary.
    """
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes.reshape(1, -1)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise BadCode(f"codes must lie in [0, {1 << bits})")
    n, k = codes.shape
    c = codes.astype(np.uint8)
    if bits == 8:
        return np.ascontiguousarray(c)
    shifts = np.arange(bits, dtype=np.uint8)
    bitplanes = (c[:, :, None] >> shifts) & 1
    stream = bitplanes.reshape(n, k * bits)
    return np.packbits(stream, axis=1, bitorder="little")


def unpack_codes(packed, bits: int, k: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim == 1:
        packed = packed.reshape(1, -1)
    n = packed.shape[0]
    if packed.shape[1] != row_bytes(k, bits):
        raise ShapeError(f"expected {row_bytes(k, bits)} bytes per row, got {packed.shape[1]}")
    if bits == 8:
        return packed.copy()
    stream = np.unpackbits(packed, axis=1, bitorder="little")
    if np.any(stream[:, k * bits :]):
        raise BadCode("non-zero padding bits after the last code of a row")
    planes = stream[:, : k * bits].reshape(n, k, bits)
    weights = (1 << np.arange(bits, dtype=np.uint8)).astype(np.uint8)
    return (planes * weights).sum(axis=2, dtype=np.uint8)


# -- 16-bit narrowing ---------------------------------------------------------


def narrow(values, target: str) -> np.ndarray:
    """Round float32 values to fp16/bf16 (nearest-even), returned as raw uint16 bits."""
    v = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise NarrowingError("cannot narrow non-finite values")
    if target == "fp16":
        with np.errstate(over="ignore"):
            h = v.astype(np.float16)
        if not np.all(np.isfinite(h)):
            raise NarrowingError("value overflows fp16")
        return h.view(np.uint16)
    if target == "bf16":
        u = v.view(np.uint32).astype(np.uint64)
        rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
        out = rounded.astype(np.uint16)
        if np.any((out & 0x7F80) == 0x7F80):
            raise NarrowingError("value overflows bf16")
        return out
    raise ConfigError(f"unknown 16-bit target {target!r}")


def widen(bits16, target: str) -> np.ndarray:
    b = np.asarray(bits16, dtype=np.uint16)
    if target == "fp16":
        return b.view(np.float16).astype(np.float32)
    if target == "bf16":
        return (b.astype(np.uint32) << 16).view(np.float32)
    raise ConfigError(f"unknown 16-bit target {target!r}")


def narrow_lut(values, target: str = "fp16") -> np.ndarray:
    return narrow(values, target)


def _round_trip_scales(values: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "fp32":
        return np.asarray(values, dtype=np.float32).copy()
    return widen(narrow(values, dtype), dtype)


# -- file format --------------------------------------------------------------

MAGIC = b"ANYQ"
VERSION = 1

_HEADER = struct.Struct(
    "<4sHH"  # magic, version, header size
    "II"  # N, K
    "BBBB"  # bits, codebook, granularity kind, flags
    "I"  # granularity size
    "BBBB"  # layout, lut dtype, scale dtype, learner init
    "I"  # tile_k
    "II"  # learner max_iters, restarts
    "d"  # learner rel_tol
    "BBH"  # learner weighting, reserved, local_trials (0 = auto)
    "Q"  # seed
    "I"  # group count
    "QQQQQQQQ"  # (offset, length) for codes, luts, alphas, betas
)
HEADER_SIZE = _HEADER.size

_CODEBOOKS = [CodebookKind.INT, CodebookKind.FP4, CodebookKind.NF4, CodebookKind.ANY]
_GRANS = [GranularityKind.TENSOR, GranularityKind.ROW, GranularityKind.COLUMN, GranularityKind.GROUP, GranularityKind.BLOCK]
_LAYOUTS = ["row", "ktiled"]
_LUT_DTYPES = ["fp16", "bf16"]
_SCALE_DTYPES = ["fp16", "bf16", "fp32"]
_INITS = [Init.KMEANS_PP, Init.RANDOM, Init.INT_GRID, Init.NF4]
_WEIGHTINGS = [Weighting.WEIGHTS_ONLY, Weighting.WEIGHTS_ACTIVATIONS, Weighting.WEIGHTS_ACTIVATIONS_SCALES]
_FLAG_SYMMETRIC = 1
_FLAG_SHIFTED = 2


def _scale_bytes(values: np.ndarray, dtype: str) -> bytes:
    if dtype == "fp32":
        return np.asarray(values, dtype="<f4").tobytes()
    return narrow(values, dtype).astype("<u2").tobytes()


def _scale_from_bytes(buf: bytes, dtype: str, count: int) -> np.ndarray:
    if dtype == "fp32":
        return np.frombuffer(buf, dtype="<f4", count=count).astype(np.float32)
    return widen(np.frombuffer(buf, dtype="<u2", count=count), dtype)


def to_bytes(qt: QuantizedTensor) -> bytes:
    """Serialize ``qt`` (after narrowing LUTs and scales to their storage dtypes)."""
    cfg = qt.cfg
    n, k = qt.shape
    codes = pack_codes(qt.codes, cfg.bits).tobytes()
    luts = b"" if qt.luts is None else narrow(qt.luts, cfg.lut_dtype).astype("<u2").tobytes()
    alphas = _scale_bytes(qt.alphas, cfg.scale_dtype)
    betas = b"" if cfg.symmetric else _scale_bytes(qt.betas, cfg.scale_dtype)
    if np.any(_scale_from_bytes(alphas, cfg.scale_dtype, len(qt.alphas)) <= 0):
        raise NarrowingError(f"a group scale underflows {cfg.scale_dtype}; store scales as fp32")

    offsets = []
    pos = HEADER_SIZE
    for sec in (codes, luts, alphas, betas):
        offsets += [pos, len(sec)]
        pos += len(sec)
    lc = cfg.learner
    flags = (_FLAG_SYMMETRIC if cfg.symmetric else 0) | (_FLAG_SHIFTED if cfg.int_range == "shifted" else 0)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        HEADER_SIZE,
        n,
        k,
        cfg.bits,
        _CODEBOOKS.index(cfg.codebook),
        _GRANS.index(cfg.granularity.kind),
        flags,
        cfg.granularity.size,
        _LAYOUTS.index(qt.layout.kind),
        _LUT_DTYPES.index(cfg.lut_dtype),
        _SCALE_DTYPES.index(cfg.scale_dtype),
        _INITS.index(lc.init),
        qt.layout.tile_k,
        lc.max_iters,
        lc.restarts,
        lc.rel_tol,
        _WEIGHTINGS.index(lc.weighting),
        0,
        lc.local_trials or 0,
        cfg.seed,
        len(qt.alphas),
        *offsets,
    )
    return header + codes + luts + alphas + betas


def _pick(table: list, index: int, what: str):
    if index >= len(table):
        raise InvariantViolation(f"unknown {what} id {index}")
    return table[index]


def from_bytes(data: bytes) -> QuantizedTensor:
    data = bytes(data)
    if len(data) < 4:
        raise Truncated(f"file is {len(data)} bytes, too short for the magic")
    if data[:4] != MAGIC:
        raise MagicMismatch(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 6:
        raise Truncated("file ends inside the version field")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"ANYQ version {version} is not supported (expected {VERSION})")
    if len(data) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, file has {len(data)}")
    f = _HEADER.unpack_from(data, 0)
    (_, _, hsize, n, k, bits, cb, gk, flags, gsize, lay, lutd, scd, init, tile_k,
     max_iters, restarts, rel_tol, weighting, _reserved, local_trials, seed, ngroups) = f[:23]
    sections = f[23:]
    if hsize != HEADER_SIZE:
        raise InvariantViolation(f"header size field {hsize} != {HEADER_SIZE}")
    if n < 1 or k < 1:
        raise InvariantViolation(f"invalid shape ({n}, {k})")
    try:
        learner = LearnerConfig(
            init=_pick(_INITS, init, "init"),
            max_iters=max_iters,
            rel_tol=rel_tol,
            restarts=restarts,
            weighting=_pick(_WEIGHTINGS, weighting, "weighting"),
            local_trials=local_trials or None,
        )
        cfg = QuantConfig(
            bits=bits,
            codebook=_pick(_CODEBOOKS, cb, "codebook"),
            granularity=Granularity(_pick(_GRANS, gk, "granularity"), gsize),
            symmetric=bool(flags & _FLAG_SYMMETRIC),
            learner=learner,
            seed=seed,
            int_range="shifted" if flags & _FLAG_SHIFTED else "standard",
            lut_dtype=_pick(_LUT_DTYPES, lutd, "lut dtype"),
            scale_dtype=_pick(_SCALE_DTYPES, scd, "scale dtype"),
        )
        layout = Layout(_pick(_LAYOUTS, lay, "layout"), tile_k)
    except ConfigError as exc:
        raise InvariantViolation(f"invalid configuration in header: {exc}") from exc

    if ngroups != group_count((n, k), cfg.granularity):
        raise InvariantViolation(f"group count {ngroups} inconsistent with shape and granularity")
    scale_width = 4 if cfg.scale_dtype == "fp32" else 2
    expected = [
        n * row_bytes(k, bits),
        n * cfg.levels * 2 if cfg.codebook is CodebookKind.ANY else 0,
        ngroups * scale_width,
        0 if cfg.symmetric else ngroups * scale_width,
    ]
    pos = HEADER_SIZE
    for i, want in enumerate(expected):
        off, length = sections[2 * i], sections[2 * i + 1]
        if off != pos or length != want:
            raise InvariantViolation(f"section {i} at ({off}, {length}), expected ({pos}, {want})")
        pos += length
    if len(data) < pos:
        raise Truncated(f"file has {len(data)} bytes, sections end at {pos}")
    if len(data) > pos:
        raise InvariantViolation(f"{len(data) - pos} trailing bytes after the last section")

    def section(i):
        off, length = sections[2 * i], sections[2 * i + 1]
        return data[off : off + length]

    packed = np.frombuffer(section(0), dtype=np.uint8).reshape(n, row_bytes(k, bits))
    codes = unpack_codes(packed, bits, k)
    luts = None
    if cfg.codebook is CodebookKind.ANY:
        luts = widen(np.frombuffer(section(1), dtype="<u2"), cfg.lut_dtype).reshape(n, cfg.levels)
    alphas = _scale_from_bytes(section(2), cfg.scale_dtype, ngroups)
    if cfg.symmetric:
        betas = np.zeros(ngroups, dtype=np.float32)
    else:
        betas = _scale_from_bytes(section(3), cfg.scale_dtype, ngroups)
    return QuantizedTensor((n, k), cfg, codes, alphas, betas, luts, layout)


def payload_bits_per_entry(data_or_size, n: int, k: int) -> float:
    """Bits per weight spent on the payload, i.e. everything after the header."""
    size = data_or_size if isinstance(data_or_size, int) else len(data_or_size)
    return 8 * (size - HEADER_SIZE) / (n * k)


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_file(qt: QuantizedTensor, path):
    atomic_write(path, to_bytes(qt))


def read_file(path) -> QuantizedTensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

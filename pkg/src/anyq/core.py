"""Shared types, configuration, errors and per-row random streams."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class AnyqError(Exception):
    """Base class for all library errors."""


class NonFiniteError(AnyqError, ValueError):
    pass


class ShapeError(AnyqError, ValueError):
    pass


class ConfigError(AnyqError, ValueError):
    pass


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate ``data`` as a finite, non-empty 2-D float32 array.

    1-D input is treated as a single row. A new array is returned only when
    a dtype conversion or reshape is needed.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D data, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name}: empty shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{name}: non-finite value at {tuple(int(i) for i in bad)}")
    return arr


class CodebookKind(enum.Enum):
    INT = "int"
    FP4 = "fp4"
    NF4 = "nf4"
    ANY = "any"


class Init(enum.Enum):
    KMEANS_PP = "kmeans++"
    RANDOM = "random"
    INT_GRID = "int"
    NF4 = "nf4"


class Weighting(enum.Enum):
    WEIGHTS_ONLY = "w"
    WEIGHTS_ACTIVATIONS = "wx"
    WEIGHTS_ACTIVATIONS_SCALES = "awx"


class GranularityKind(enum.Enum):
    TENSOR = "tensor"
    ROW = "row"
    COLUMN = "column"
    GROUP = "group"
    BLOCK = "block"


@dataclass(frozen=True)
class Granularity:
    kind: GranularityKind
    size: int = 0

    def __post_init__(self):
        if self.kind is GranularityKind.GROUP and self.size < 2:
            raise ConfigError(f"group size must be >= 2, got {self.size}")
        if self.kind is GranularityKind.BLOCK and self.size < 1:
            raise ConfigError(f"block size must be >= 1, got {self.size}")

    @classmethod
    def tensorwise(cls) -> "Granularity":
        return cls(GranularityKind.TENSOR)

    @classmethod
    def rowwise(cls) -> "Granularity":
        return cls(GranularityKind.ROW)

    @classmethod
    def columnwise(cls) -> "Granularity":
        return cls(GranularityKind.COLUMN)

    @classmethod
    def groupwise(cls, g: int = 128) -> "Granularity":
        return cls(GranularityKind.GROUP, g)

    @classmethod
    def blockwise(cls, b: int) -> "Granularity":
        return cls(GranularityKind.BLOCK, b)

    def __str__(self) -> str:
        if self.kind in (GranularityKind.GROUP, GranularityKind.BLOCK):
            return f"{self.kind.value}:{self.size}"
        return self.kind.value


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters of the per-row weighted k-means.

    ``local_trials`` is the number of candidate seeds drawn per k-means++
    step (the greedy variant); ``None`` means ``2 + floor(ln k)``.
    """

    init: Init = Init.KMEANS_PP
    max_iters: int = 100
    rel_tol: float = 1e-6
    restarts: int = 1
    weighting: Weighting = Weighting.WEIGHTS_ACTIVATIONS_SCALES
    local_trials: Optional[int] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (self.rel_tol >= 0 and math.isfinite(self.rel_tol)):
            raise ConfigError(f"rel_tol must be a finite value >= 0, got {self.rel_tol}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.local_trials is not None and self.local_trials < 1:
            raise ConfigError(f"local_trials must be >= 1, got {self.local_trials}")


SUPPORTED_BITS = (2, 3, 4, 8)
STORAGE_DTYPES = ("fp16", "bf16", "fp32")


@dataclass(frozen=True)
class QuantConfig:
    """Everything needed to quantize one weight matrix.

    ``int_range`` selects the integer grid convention: ``"standard"`` is
    [-2^(n-1), 2^(n-1)-1], ``"shifted"`` is [-2^(n-1)+1, 2^(n-1)].
    ``lut_dtype``/``scale_dtype`` only matter once a tensor is narrowed for
    storage.
    """

    bits: int = 4
    codebook: CodebookKind = CodebookKind.ANY
    granularity: Granularity = field(default_factory=lambda: Granularity.groupwise(128))
    symmetric: bool = False
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    seed: int = 0
    int_range: str = "standard"
    lut_dtype: str = "fp16"
    scale_dtype: str = "fp16"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.codebook in (CodebookKind.FP4, CodebookKind.NF4) and self.bits != 4:
            raise ConfigError(f"{self.codebook.value} requires bits == 4")
        if self.int_range not in ("standard", "shifted"):
            raise ConfigError(f"int_range must be 'standard' or 'shifted', got {self.int_range!r}")
        if self.lut_dtype not in ("fp16", "bf16"):
            raise ConfigError(f"lut_dtype must be fp16 or bf16, got {self.lut_dtype!r}")
        if self.scale_dtype not in STORAGE_DTYPES:
            raise ConfigError(f"scale_dtype must be one of {STORAGE_DTYPES}, got {self.scale_dtype!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits unsigned, got {self.seed}")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def name(self) -> str:
        prefix = {CodebookKind.INT: "int", CodebookKind.ANY: "any"}.get(self.codebook)
        return f"{prefix}{self.bits}" if prefix else self.codebook.value


def format_config(name: str, group_size: Optional[int] = 128, **overrides) -> QuantConfig:
    """Build a :class:`QuantConfig` from a short name such as ``"any4"`` or ``"nf4"``.

    ``group_size=None`` selects rowwise scaling.
    """
    name = name.strip().lower()
    if name in ("fp4", "nf4"):
        kind, bits = CodebookKind(name), 4
    elif name[:3] in ("int", "any") and name[3:].isdigit():
        kind = CodebookKind.INT if name.startswith("int") else CodebookKind.ANY
        bits = int(name[3:])
    else:
        raise ConfigError(f"unknown format {name!r}")
    gran = Granularity.rowwise() if group_size is None else Granularity.groupwise(group_size)
    overrides.setdefault("granularity", gran)
    return QuantConfig(bits=bits, codebook=kind, **overrides)


def rng_for_row(seed: int, row: int) -> np.random.Generator:
    """Counter-based generator whose stream depends only on ``(seed, row)``.

    Philox is keyed with the 128-bit value (seed, row), so rows never share
    state and the result does not depend on which thread handles the row.
    """
    if not 0 <= seed < 2**64 or not 0 <= row < 2**64:
        raise ConfigError("seed and row must be unsigned 64-bit integers")
    key = np.array([seed, row], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

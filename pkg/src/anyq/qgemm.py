"""``y = x @ W.T`` with quantized ``W``: a dense reference and fused LUT kernels.

Every path accumulates each output element in float32, adding
``x[m, k] * w[n, k]`` for ascending ``k``, so all of them agree bit for bit
with :func:`gemm_reference`. Fused kernels never build the dense weight
matrix; for each row and scale group they fill a ``2^bits``-entry local table
``alpha * lut + beta`` and index it with the codes.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numba
import numpy as np

from .codebooks import storage_bits_per_entry
from .core import GranularityKind, LearnerConfig, ShapeError, as_matrix, format_config
from .pack import Layout, QuantizedTensor, ktile_order, to_ktiled

# rows of x at or below this use the weights-outer kernel
SMALL_M = 8

_GRAN_CODES = {
    GranularityKind.TENSOR: 0,
    GranularityKind.ROW: 1,
    GranularityKind.COLUMN: 2,
    GranularityKind.GROUP: 3,
    GranularityKind.BLOCK: 4,
}


class PlanMismatch(ShapeError):
    pass


@dataclass(frozen=True)
class GemmPlan:
    m: int
    n: int
    k: int
    layout: Layout
    path: str = "auto"  # "auto", "weights_left" (M <= 8) or "weights_right"

    @classmethod
    def for_inputs(cls, x: np.ndarray, qt: QuantizedTensor, path: str = "auto") -> "GemmPlan":
        return cls(x.shape[0], qt.shape[0], qt.shape[1], qt.layout, path)

    def resolved_path(self) -> str:
        if self.path == "auto":
            return "weights_left" if self.m <= SMALL_M else "weights_right"
        return self.path


def _check_x(x, qt: QuantizedTensor) -> np.ndarray:
    x = as_matrix(x, "activations")
    if x.shape[1] != qt.shape[1]:
        raise ShapeError(f"activations have K={x.shape[1]}, weights have K={qt.shape[1]}")
    return x


def gemm_reference(x, qt: QuantizedTensor) -> np.ndarray:
    """Ground truth: dequantize ``W`` fully, then accumulate over ascending ``k``."""
    x = _check_x(x, qt)
    w = qt.dequantize()
    y = np.zeros((x.shape[0], qt.shape[0]), dtype=np.float32)
    for k in range(x.shape[1]):
        y += x[:, k : k + 1] * w[None, :, k]
    return y


@numba.njit(cache=True)
def _group(gkind, gsize, groups_per_row, n, k):
    if gkind == 0:
        return 0
    if gkind == 1:
        return n
    if gkind == 2:
        return k
    if gkind == 3:
        return n * groups_per_row + k // gsize
    return (n // gsize) * groups_per_row + k // gsize


@numba.njit(cache=True)
def _fused_weights_left(x, codes, pos, luts, per_row, alphas, betas, gkind, gsize, gpr, out):
    m_rows, kdim = x.shape
    n_rows = codes.shape[0]
    levels = luts.shape[1]
    table = np.empty(levels, dtype=np.float32)
    acc = np.empty(m_rows, dtype=np.float32)
    for n in range(n_rows):
        lut_row = n if per_row else 0
        current = -1
        for m in range(m_rows):
            acc[m] = np.float32(0.0)
        for k in range(kdim):
            g = _group(gkind, gsize, gpr, n, k)
            if g != current:
                a = alphas[g]
                b = betas[g]
                for q in range(levels):
                    table[q] = a * luts[lut_row, q] + b
                current = g
            wv = table[codes[n, pos[k]]]
            for m in range(m_rows):
                acc[m] += x[m, k] * wv
        for m in range(m_rows):
            out[m, n] = acc[m]


@numba.njit(cache=True)
def _fused_weights_right(x, codes, pos, luts, per_row, alphas, betas, gkind, gsize, gpr, out):
    m_rows, kdim = x.shape
    n_rows = codes.shape[0]
    levels = luts.shape[1]
    table = np.empty(levels, dtype=np.float32)
    wrow = np.empty(kdim, dtype=np.float32)
    for n in range(n_rows):
        lut_row = n if per_row else 0
        current = -1
        for k in range(kdim):
            g = _group(gkind, gsize, gpr, n, k)
            if g != current:
                a = alphas[g]
                b = betas[g]
                for q in range(levels):
                    table[q] = a * luts[lut_row, q] + b
                current = g
            wrow[k] = table[codes[n, pos[k]]]
        for m in range(m_rows):
            acc = np.float32(0.0)
            for k in range(kdim):
                acc += x[m, k] * wrow[k]
            out[m, n] = acc


def _kernel_args(qt: QuantizedTensor):
    n, k = qt.shape
    gran = qt.cfg.granularity
    if qt.luts is not None:
        luts, per_row = np.ascontiguousarray(qt.luts, dtype=np.float32), True
    else:
        luts, per_row = qt.codebook.values.reshape(1, -1).astype(np.float32), False
    if qt.layout.kind == "row":
        pos = np.arange(k, dtype=np.int64)
    else:
        pos = np.empty(k, dtype=np.int64)
        pos[ktile_order(k, qt.layout.tile_k)] = np.arange(k, dtype=np.int64)
    size = max(gran.size, 1)
    gpr = -(-k // size) if gran.kind in (GranularityKind.GROUP, GranularityKind.BLOCK) else 0
    return (
        np.ascontiguousarray(qt.codes),
        pos,
        luts,
        per_row,
        np.ascontiguousarray(qt.alphas, dtype=np.float32),
        np.ascontiguousarray(qt.betas, dtype=np.float32),
        _GRAN_CODES[gran.kind],
        size,
        gpr,
    )


def _gemm_numpy(x: np.ndarray, qt: QuantizedTensor, args) -> np.ndarray:
    codes, pos, luts, per_row, alphas, betas, *_ = args
    n = qt.shape[0]
    rows = np.arange(n)
    gidx = qt.scales.index
    y = np.zeros((x.shape[0], n), dtype=np.float32)
    for k in range(x.shape[1]):
        c = codes[:, pos[k]]
        v = luts[rows, c] if per_row else luts[0, c]
        g = gidx[:, k]
        col = alphas[g] * v + betas[g]
        y += x[:, k : k + 1] * col[None, :]
    return y


def gemm_fused(x, qt: QuantizedTensor, plan: Optional[GemmPlan] = None, impl: str = "scalar") -> np.ndarray:
    """LUT-dequantize-on-the-fly GEMM.

    ``impl="scalar"`` runs the compiled scalar loops (weights-left for small
    ``M``, weights-right otherwise); ``impl="numpy"`` runs a vectorized loop
    over ``k``. Both match :func:`gemm_reference` exactly.
    """
    x = _check_x(x, qt)
    if plan is None:
        plan = GemmPlan.for_inputs(x, qt)
    if (plan.m, plan.n, plan.k) != (x.shape[0], qt.shape[0], qt.shape[1]):
        raise PlanMismatch(f"plan {(plan.m, plan.n, plan.k)} does not match inputs")
    if plan.layout != qt.layout:
        raise PlanMismatch(f"plan layout {plan.layout} does not match tensor layout {qt.layout}")
    args = _kernel_args(qt)
    if impl == "numpy":
        return _gemm_numpy(x, qt, args)
    if impl != "scalar":
        raise ValueError(f"unknown impl {impl!r}")
    out = np.zeros((plan.m, plan.n), dtype=np.float32)
    x = np.ascontiguousarray(x, dtype=np.float32)
    path = plan.resolved_path()
    if path == "weights_left":
        _fused_weights_left(x, *args, out)
    elif path == "weights_right":
        _fused_weights_right(x, *args, out)
    else:
        raise ValueError(f"unknown path {plan.path!r}")
    return out


# -- benchmark ----------------------------------------------------------------

BENCH_HEADER = ("shape", "format", "layout", "median_ns", "p10_ns", "p90_ns", "bytes_per_weight")


@dataclass(frozen=True)
class BenchRow:
    shape: str
    format: str
    layout: str
    median_ns: int
    p10_ns: int
    p90_ns: int
    bytes_per_weight: float
    bytes_per_s: float
    ratio_vs_dense: float

    def csv_fields(self) -> tuple:
        return (self.shape, self.format, self.layout, self.median_ns, self.p10_ns, self.p90_ns, f"{self.bytes_per_weight:.6f}")


def parse_shape(text: str) -> tuple[int, int, int]:
    """``"MxNxK"`` -> (M, N, K)."""
    try:
        m, n, k = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"shape must look like MxNxK, got {text!r}") from None
    if min(m, n, k) < 1:
        raise ValueError(f"shape dimensions must be positive, got {text!r}")
    return m, n, k


def _time(fn, repeats: int) -> np.ndarray:
    fn()  # warm-up (JIT compile, caches)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return np.array(samples, dtype=np.float64)


def bench(shapes: Iterable, formats: Iterable[str], repeats: int = 10, group_size: int = 128,
          layout: str = "row", tile_k: int = 8, seed: int = 0) -> list[BenchRow]:
    """Time dense fp32 ``x @ W.T`` against the fused kernel for each format.

    ``shapes`` holds ``(M, N, K)`` tuples or ``"MxNxK"`` strings. Timings are
    informational; ``bytes_per_weight`` follows the storage accounting.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    from .quantize import quantize

    rows = []
    for shape in shapes:
        m, n, k = parse_shape(shape) if isinstance(shape, str) else tuple(shape)
        label = f"{m}x{n}x{k}"
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((n, k)).astype(np.float32)
        x = rng.standard_normal((m, k)).astype(np.float32)
        dense = _time(lambda: x @ w.T, repeats)
        dense_med = float(np.median(dense))
        rows.append(_bench_row(label, "fp32", "dense", dense, 4.0, n * k, dense_med))
        for name in formats:
            # timing only needs a valid tensor, not a converged LUT
            overrides = {"learner": LearnerConfig(max_iters=5)} if name.startswith("any") else {}
            cfg = format_config(name, group_size if k >= group_size else None, **overrides)
            qt = quantize(w, cfg, workers=1)
            if layout == "ktiled":
                qt = to_ktiled(qt, tile_k)
            plan = GemmPlan.for_inputs(x, qt)
            t = _time(lambda: gemm_fused(x, qt, plan), repeats)
            bpw = storage_bits_per_entry(cfg, n, k) / 8
            rows.append(_bench_row(label, name, str(qt.layout), t, bpw, n * k, dense_med))
    return rows


def _bench_row(label, fmt, layout, samples, bpw, weights, dense_med) -> BenchRow:
    med = float(np.median(samples))
    return BenchRow(
        shape=label,
        format=fmt,
        layout=layout,
        median_ns=int(med),
        p10_ns=int(np.percentile(samples, 10)),
        p90_ns=int(np.percentile(samples, 90)),
        bytes_per_weight=bpw,
        bytes_per_s=bpw * weights / (med * 1e-9) if med > 0 else float("inf"),
        ratio_vs_dense=med / dense_med if dense_med > 0 else float("inf"),
    )


def bench_csv(rows: Iterable[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    for r in rows:
        writer.writerow(r.csv_fields())
    return buf.getvalue()


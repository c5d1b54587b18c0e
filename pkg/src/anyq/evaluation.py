"""Quantization quality: weight reconstruction and output-activation error."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .calibration import ActivationStats, ToyModel, collect_stats
from .codebooks import storage_bits_per_entry
from .core import QuantConfig, ShapeError, as_matrix, format_config
from .pack import QuantizedTensor
from .qgemm import gemm_reference
from .quantize import quantize

SCHEMA = "anyq-eval/1"


def _check(w: np.ndarray, qt: QuantizedTensor):
    if w.shape != tuple(qt.shape):
        raise ShapeError(f"weights {w.shape} and quantized tensor {qt.shape} differ")


def weight_error(w, qt: QuantizedTensor) -> tuple[float, Optional[float]]:
    """``(mse, relative Frobenius error)``; the relative error is ``None`` for an all-zero ``w``."""
    w = as_matrix(w, "weights")
    _check(w, qt)
    diff = w.astype(np.float64) - qt.dequantize().astype(np.float64)
    mse = float(np.mean(diff * diff))
    norm = float(np.linalg.norm(w.astype(np.float64)))
    rel = float(np.linalg.norm(diff)) / norm if norm > 0 else None
    return mse, rel


def output_error(w, qt: QuantizedTensor, x) -> float:
    """Mean over samples and outputs of ``(x @ dequant(W).T - x @ W.T)^2``."""
    w = as_matrix(w, "weights")
    _check(w, qt)
    x = as_matrix(x, "activations")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"activations have K={x.shape[1]}, weights have K={w.shape[1]}")
    y = x.astype(np.float64) @ w.T.astype(np.float64)
    y_hat = gemm_reference(x, qt).astype(np.float64)
    return float(np.mean((y_hat - y) ** 2))


def synthetic_activations(stats: Optional[np.ndarray], k: int, samples: int, seed: int) -> np.ndarray:
    """Gaussian activations whose per-channel ``E|x_j|`` equals ``stats``."""
    rng = np.random.default_rng(seed)
    sigma = np.ones(k) if stats is None else np.asarray(stats, dtype=np.float64) * math.sqrt(math.pi / 2)
    return (rng.standard_normal((samples, k)) * sigma).astype(np.float32)


@dataclass
class EvalRow:
    module: str
    format: str
    weight_mse: float
    weight_frobenius_rel: Optional[float]
    output_mse: float
    bits_per_entry: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def get(self, fmt: str, module: Optional[str] = None) -> EvalRow:
        for r in self.rows:
            if r.format == fmt and (module is None or r.module == module):
                return r
        raise KeyError((module, fmt))

    def aggregate(self) -> list[EvalRow]:
        """Per-format means over modules (module name ``"*"``)."""
        out = []
        for fmt in dict.fromkeys(r.format for r in self.rows):
            rs = [r for r in self.rows if r.format == fmt]
            rels = [r.weight_frobenius_rel for r in rs if r.weight_frobenius_rel is not None]
            out.append(EvalRow(
                "*",
                fmt,
                float(np.mean([r.weight_mse for r in rs])),
                float(np.mean(rels)) if rels else None,
                float(np.mean([r.output_mse for r in rs])),
                float(np.mean([r.bits_per_entry for r in rs])),
            ))
        return out

    def to_csv(self, with_aggregate: bool = True) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {SCHEMA}\n")
        writer = csv.writer(buf, lineterminator="\n")
        cols = list(EvalRow.__dataclass_fields__)
        writer.writerow(cols)
        rows = self.rows + (self.aggregate() if with_aggregate and len({r.module for r in self.rows}) > 1 else [])
        for r in rows:
            writer.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])
        return buf.getvalue()

    def to_json(self, with_aggregate: bool = True) -> str:
        doc = {"schema": SCHEMA, "rows": [asdict(r) for r in self.rows]}
        if with_aggregate:
            doc["aggregate"] = [asdict(r) for r in self.aggregate()]
        return json.dumps(doc, indent=2, sort_keys=True)


def _cfg(fmt, base: Optional[QuantConfig], group_size: Optional[int]) -> QuantConfig:
    if isinstance(fmt, QuantConfig):
        return fmt
    cfg = format_config(fmt, group_size)
    if base is not None:
        cfg = replace(cfg, symmetric=base.symmetric, learner=base.learner, seed=base.seed,
                      int_range=base.int_range, lut_dtype=base.lut_dtype, scale_dtype=base.scale_dtype)
    return cfg


def evaluate(w, qt: QuantizedTensor, x, module: str = "w", label: Optional[str] = None) -> EvalRow:
    w = as_matrix(w, "weights")
    mse, rel = weight_error(w, qt)
    return EvalRow(module, label or qt.cfg.name, mse, rel, output_error(w, qt, x),
                   storage_bits_per_entry(qt.cfg, *w.shape))


def compare_formats(w, formats: Iterable, base: Optional[QuantConfig] = None, stats=None, x=None,
                    group_size: Optional[int] = 128, module: str = "w", eval_samples: int = 256,
                    eval_seed: int = 1, workers: Optional[int] = 1) -> EvalReport:
    """Quantize ``w`` with every format and report both error metrics.

    ``formats`` holds names (``"nf4"``, ``"any4"``, ...) or full configs.
    Without ``x``, evaluation activations are drawn fresh from a Gaussian
    matching ``stats`` using ``eval_seed``.
    """
    w = as_matrix(w, "weights")
    if stats is not None:
        stats = np.asarray(stats, dtype=np.float32)
        if stats.shape != (w.shape[1],):
            raise ShapeError(f"stats have length {stats.size}, weights have K={w.shape[1]}")
    if x is None:
        x = synthetic_activations(stats, w.shape[1], eval_samples, eval_seed)
    report = EvalReport()
    for fmt in formats:
        cfg = _cfg(fmt, base, group_size)
        qt = quantize(w, cfg, stats, workers=workers)
        report.rows.append(evaluate(w, qt, x, module, fmt if isinstance(fmt, str) else cfg.name))
    return report


def evaluate_model(model: ToyModel, calib_inputs, eval_inputs, formats: Iterable,
                   base: Optional[QuantConfig] = None, group_size: Optional[int] = 128,
                   stats: Optional[ActivationStats] = None, workers: Optional[int] = 1) -> EvalReport:
    """Per-layer comparison on a toy model.

    Stats come from ``calib_inputs`` unless given; each layer's output error
    is measured on the activations that ``eval_inputs`` produce at that layer
    in the unquantized model.
    """
    if stats is None:
        stats = collect_stats(model, calib_inputs)
    seen = model.layer_inputs(eval_inputs)
    report = EvalReport()
    formats = list(formats)
    for layer in model.layers:
        k = layer.weight.shape[1]
        vec = stats.vector_for(layer.name, k)
        gs = group_size if group_size is None or group_size <= k else None
        for fmt in formats:
            cfg = _cfg(fmt, base, gs)
            qt = quantize(layer.weight, cfg, vec, workers=workers)
            report.rows.append(evaluate(layer.weight, qt, seen[layer.name], layer.name,
                                        fmt if isinstance(fmt, str) else cfg.name))
    return report

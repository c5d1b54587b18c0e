"""Round-to-nearest quantization for fixed codebooks, and dispatch to the learner."""

from __future__ import annotations

from typing import Optional

from .codebooks import codebook_for, round_to_codebook, scaled_domain_table
from .core import CodebookKind, QuantConfig, as_matrix
from .learner import quantize_any
from .pack import QuantizedTensor
from .scaling import compute_scales, scale_weights


def quantize_fixed(w, cfg: QuantConfig) -> QuantizedTensor:
    if cfg.codebook is CodebookKind.ANY:
        raise ValueError("quantize_fixed handles int/fp4/nf4 formats only")
    w = as_matrix(w, "weights")
    cb = codebook_for(cfg)
    scales = compute_scales(w, cfg.granularity, cfg.symmetric, cb.qmin, cb.qmax)
    codes = round_to_codebook(scale_weights(w, scales), scaled_domain_table(cfg))
    return QuantizedTensor(w.shape, cfg, codes, scales.alphas, scales.betas)


def quantize(w, cfg: QuantConfig, stats=None, workers: Optional[int] = None) -> QuantizedTensor:
    """Quantize a weight matrix with any supported format.

    ``stats`` (per-input-channel mean absolute activations) only affects
    learned formats.
    """
    if cfg.codebook is CodebookKind.ANY:
        return quantize_any(w, cfg, stats, workers=workers)
    return quantize_fixed(w, cfg)

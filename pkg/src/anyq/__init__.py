"""Fixed-codebook and learned per-row LUT weight quantization."""

from .codebooks import Codebook, codebook_for, fp4_table, int_grid, nf4_table, storage_bits_per_entry
from .core import (
    CodebookKind,
    Granularity,
    Init,
    LearnerConfig,
    QuantConfig,
    Weighting,
    format_config,
)
from .learner import quantize_any, weighted_kmeans
from .pack import QuantizedTensor, from_bytes, read_file, to_bytes, write_file
from .qgemm import gemm_fused, gemm_reference
from .quantize import quantize, quantize_fixed

__all__ = [
    "Codebook", "CodebookKind", "Granularity", "Init", "LearnerConfig", "QuantConfig", "QuantizedTensor",
    "Weighting", "codebook_for", "format_config", "fp4_table", "from_bytes", "gemm_fused", "gemm_reference",
    "int_grid", "nf4_table", "quantize", "quantize_any", "quantize_fixed", "read_file", "storage_bits_per_entry",
    "to_bytes", "weighted_kmeans", "write_file",
]

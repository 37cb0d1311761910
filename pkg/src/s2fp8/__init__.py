"""FP8 / S2FP8 numerics emulation: float formats, the S2FP8 codec, tensor kernels
and a small training engine for precision-mode experiments."""

from ._backend import BACKEND
from .codec import S2Encoded, S2Stats, compute_statistics, decode, encode, s2fp8_truncate
from .engine import Mode, QuantConfig, quantize_boundary
from .formats import BF16, FP8, FP16, FP32, FloatFormat, NonFiniteError, format_properties, make_format, truncate_rne, truncate_tensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "FloatFormat", "make_format", "format_properties", "truncate_rne", "truncate_tensor",
    "FP8", "FP16", "BF16", "FP32", "NonFiniteError", "S2Stats", "S2Encoded", "compute_statistics",
    "s2fp8_truncate", "encode", "decode", "Mode", "QuantConfig", "quantize_boundary",
]

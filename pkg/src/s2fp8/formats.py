"""Parameterized IEEE-like binary float formats and RNE truncation into them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._backend import kernels


class NonFiniteError(ValueError):
    """Raised when a NaN or infinity reaches an operation that requires finite input."""

    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(f"non-finite value {value!r} at index {index}")


@dataclass(frozen=True)
class FloatFormat:
    """Sign/exponent/mantissa widths of a binary float.  Always one sign bit.

    The all-ones exponent field is reserved for inf/NaN and subnormals are
    supported, as in IEEE 754.
    """

    exp_bits: int
    man_bits: int
    name: str = ""

    @property
    def sign_bits(self) -> int:
        return 1

    @property
    def bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def bias(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def emax(self) -> int:
        return self.bias

    @property
    def max_normal(self) -> float:
        return math.ldexp(2.0 - math.ldexp(1.0, -self.man_bits), self.bias)

    @property
    def binary32_exact(self) -> bool:
        """True when every value of the format is exactly a binary32 value."""
        return self.exp_bits <= 8 and self.man_bits <= 23

    def __str__(self) -> str:
        return self.name or f"E{self.exp_bits}M{self.man_bits}"


def make_format(exp_bits: int, man_bits: int, name: str = "") -> FloatFormat:
    if not isinstance(exp_bits, (int, np.integer)) or not isinstance(man_bits, (int, np.integer)):
        raise TypeError("field widths must be integers")
    if exp_bits < 2:
        raise ValueError(f"exp_bits must be >= 2, got {exp_bits}")
    if man_bits < 0:
        raise ValueError(f"man_bits must be >= 0, got {man_bits}")
    if exp_bits + man_bits + 1 > 32:
        raise ValueError(f"format 1/{exp_bits}/{man_bits} is wider than 32 bits")
    return FloatFormat(int(exp_bits), int(man_bits), name)


FP8 = make_format(5, 2, "FP8")
FP16 = make_format(5, 10, "FP16")
BF16 = make_format(8, 7, "BF16")
FP32 = make_format(8, 23, "FP32")
PRESETS = (FP32, FP16, BF16, FP8)


@dataclass(frozen=True)
class FormatProperties:
    min_subnormal: Fraction
    min_normal: Fraction
    max_normal: Fraction
    machine_epsilon: Fraction
    range_log2: int


def _pow2(e: int) -> Fraction:
    return Fraction(2) ** e


def format_properties(fmt: FloatFormat) -> FormatProperties:
    """Exact range/precision figures.  Machine epsilon is the unit round-off 2^-(m+1)."""
    min_sub = _pow2(1 - fmt.bias - fmt.man_bits)
    max_normal = (1 - _pow2(-fmt.man_bits - 1)) * _pow2(fmt.bias + 1)
    ratio = max_normal / min_sub
    # smallest r with 2^r >= ratio
    r = ratio.numerator.bit_length() - ratio.denominator.bit_length()
    while _pow2(r) < ratio:
        r += 1
    while _pow2(r - 1) >= ratio:
        r -= 1
    return FormatProperties(
        min_subnormal=min_sub,
        min_normal=_pow2(fmt.emin),
        max_normal=max_normal,
        machine_epsilon=_pow2(-fmt.man_bits - 1),
        range_log2=r,
    )


def _require_finite(x: np.ndarray) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = np.unravel_index(int(np.flatnonzero(bad)[0]), x.shape)
        idx = tuple(int(i) for i in idx)
        raise NonFiniteError(idx if len(idx) != 1 else idx[0], float(x[idx]))


def _require_truncatable(fmt: FloatFormat) -> None:
    if not fmt.binary32_exact:
        raise ValueError(f"{fmt} values are not all binary32-exact; truncation is unsupported")


def truncate_tensor(x, fmt: FloatFormat) -> np.ndarray:
    """Elementwise round-to-nearest-even into ``fmt``; result stays binary32.

    Overflow saturates to +-max_normal, anything that rounds below half the
    smallest subnormal flushes to a signed zero.
    """
    _require_truncatable(fmt)
    arr = np.asarray(x, dtype=np.float32)
    _require_finite(arr)
    return kernels.round_to_format(arr, fmt.exp_bits, fmt.man_bits)


def truncate_rne(x: float, fmt: FloatFormat) -> float:
    """Scalar version of :func:`truncate_tensor`."""
    v = np.float32(x)
    if not np.isfinite(v):
        raise NonFiniteError(0, float(x))
    return float(truncate_tensor(np.array([v]), fmt)[0])


def enumerate_representable(fmt: FloatFormat) -> list[float]:
    """All finite non-negative values of ``fmt`` in ascending order, starting at 0."""
    if fmt.bits > 16:
        raise ValueError(f"{fmt} is too wide to enumerate ({fmt.bits} bits > 16)")
    codes = np.arange(1 << (fmt.bits - 1), dtype=np.uint32)
    exp_field = codes >> fmt.man_bits
    codes = codes[exp_field != (1 << fmt.exp_bits) - 1]
    return sorted(float(v) for v in decode_bits(codes, fmt))


def encode_bits(x, fmt: FloatFormat) -> np.ndarray:
    """Bit patterns of values that are already exactly representable in ``fmt``.

    Sign bit is the most significant bit.  Returns uint8 for formats of at most
    8 bits, uint16 up to 16, else uint32.
    """
    _require_truncatable(fmt)
    arr = np.asarray(x, dtype=np.float32)
    _require_finite(arr)
    if not np.array_equal(truncate_tensor(arr, fmt), arr):
        raise ValueError(f"values not exactly representable in {fmt}")
    mag = np.abs(arr.astype(np.float64))
    sign = np.signbit(arr).astype(np.uint32)
    frac, e = np.frexp(mag)
    unbiased = e - 1
    normal = (mag != 0) & (unbiased >= fmt.emin)
    exp_field = np.where(normal, unbiased + fmt.bias, 0).astype(np.uint32)
    man_normal = np.ldexp(frac * 2.0 - 1.0, fmt.man_bits)
    man_sub = np.ldexp(mag, fmt.man_bits - fmt.emin)
    man_field = np.where(normal, man_normal, man_sub).astype(np.uint32)
    codes = (sign << (fmt.bits - 1)) | (exp_field << fmt.man_bits) | man_field
    dtype = np.uint8 if fmt.bits <= 8 else np.uint16 if fmt.bits <= 16 else np.uint32
    return codes.astype(dtype)


def decode_bits(codes, fmt: FloatFormat) -> np.ndarray:
    """Inverse of :func:`encode_bits`.  Codes using the reserved exponent are rejected."""
    _require_truncatable(fmt)
    c = np.asarray(codes).astype(np.uint32)
    if (c >> fmt.bits).any():
        raise ValueError(f"code wider than {fmt.bits} bits")
    exp_field = (c >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    reserved = exp_field == (1 << fmt.exp_bits) - 1
    if reserved.any():
        i = int(np.flatnonzero(reserved.reshape(-1))[0])
        raise ValueError(f"code {int(c.reshape(-1)[i]):#x} at index {i} uses the reserved exponent")
    man_field = (c & ((1 << fmt.man_bits) - 1)).astype(np.float64)
    sign = (c >> (fmt.bits - 1)) & 1
    normal = exp_field != 0
    mag = np.where(
        normal,
        np.ldexp(1.0 + np.ldexp(man_field, -fmt.man_bits), exp_field.astype(np.int32) - fmt.bias),
        np.ldexp(man_field, fmt.emin - fmt.man_bits),
    )
    return np.where(sign == 1, -mag, mag).astype(np.float32)


def pow2_str(e: int) -> str:
    return f"2^{e}"


def describe(fmt: FloatFormat) -> dict:
    """Row of the format comparison table, every entry an exact power-of-two expression."""
    p = format_properties(fmt)

    def log2_exact(q: Fraction) -> int:
        e = q.numerator.bit_length() - q.denominator.bit_length()
        assert _pow2(e) == q
        return e

    return {
        "format": str(fmt),
        "bits": fmt.bits,
        "s/e/m": f"1/{fmt.exp_bits}/{fmt.man_bits}",
        "min_subnormal": pow2_str(log2_exact(p.min_subnormal)),
        "min_normal": pow2_str(log2_exact(p.min_normal)),
        "max_normal": f"(1-2^{-fmt.man_bits - 1})*2^{fmt.bias + 1}",
        "approx_max_normal": pow2_str(fmt.bias + 1),
        "machine_epsilon": pow2_str(log2_exact(p.machine_epsilon)),
        "range": pow2_str(p.range_log2),
    }

"""Shifted-and-squeezed FP8 (S2FP8) tensor codec.

A tensor X is stored as FP8 codes Y plus two per-tensor factors, related by

    log2|Y_i| = alpha * log2|X_i| + beta,   sign(Y_i) = sign(X_i)

with alpha, beta chosen so the nonzero log2|Y_i| have mean 0 and max
``target_max`` (15 by default).

Log magnitudes are handled as (integer exponent, fraction in [0, 1)) pairs
and the mean is snapped to a 2^-40 grid.  Every transform then separates an
exact integer power-of-two factor from the rest, which makes the codec
exactly covariant under power-of-two rescaling of its input.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .formats import FP8, NonFiniteError, _require_finite, decode_bits, encode_bits, truncate_tensor

DEFAULT_TARGET_MAX = 15.0
MAX_TARGET = float(np.log2(FP8.max_normal))

_GRID = 2.0**-40
_F32_MAX = float(np.finfo(np.float32).max)
_LOG2_F32_MAX = float(np.log2(_F32_MAX))


@dataclass(frozen=True)
class S2Stats:
    mu: float
    m: float
    alpha: float
    beta: float
    n_nonzero: int
    target_max: float = DEFAULT_TARGET_MAX

    @property
    def degenerate(self) -> bool:
        return self.n_nonzero == 0 or self.m == self.mu


@dataclass(frozen=True)
class S2Encoded:
    stats: S2Stats
    codes: np.ndarray  # uint8 FP8 patterns, one per element
    shape: tuple


def _check_target(target_max: float) -> float:
    t = float(target_max)
    if not (0.0 < t <= MAX_TARGET):
        raise ValueError(f"target_max must be in (0, {MAX_TARGET:.4f}], got {target_max}")
    return t


def _as_f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    _require_finite(arr)
    return arr


def _split_log2(mag: np.ndarray):
    """log2(mag) as (int64 exponent, float64 fraction in [0, 1)) for mag > 0."""
    f, e = np.frexp(mag.astype(np.float64))
    return e.astype(np.int64) - 1, np.log2(f * 2.0)


def _snap(v: float) -> float:
    return round(v / _GRID) * _GRID


def _split_offset(offset: float):
    """Snap ``offset`` to the grid and split it into floor integer + remainder."""
    snapped = _snap(offset)
    whole = int(np.floor(snapped))
    return whole, snapped - whole


def compute_statistics(x, target_max: float = DEFAULT_TARGET_MAX) -> S2Stats:
    """Mean and max of log2|x| over nonzero elements, and the resulting alpha, beta.

    Degenerate tensors: no nonzeros gives alpha=1, beta=0; a single nonzero
    magnitude gives alpha=1 and a pure shift of that magnitude to 2^target_max.
    """
    t = _check_target(target_max)
    arr = _as_f32(x).reshape(-1)
    mag = np.abs(arr[arr != 0])
    n = int(mag.size)
    if n == 0:
        return S2Stats(0.0, 0.0, 1.0, 0.0, 0, t)
    e, frac = _split_log2(mag)
    if np.all(mag == mag[0]):
        m = float(e[0]) + float(frac[0])
        return S2Stats(m, m, 1.0, t - m, n, t)

    # mean = whole + rest, with whole carrying all integer content of the exponents
    total_e = int(e.sum())
    whole, rem = divmod(total_e, n)
    rest = _snap((rem + float(np.sum(frac))) / n)
    top = int(np.argmax(e.astype(np.float64) + frac))
    spread = float(e[top] - whole) + (float(frac[top]) - rest)
    mu = whole + rest
    m = float(e[top]) + float(frac[top])
    if spread <= 0.0:
        return S2Stats(m, m, 1.0, t - m, n, t)
    alpha = t / spread
    return S2Stats(mu, max(m, mu), alpha, -alpha * mu, n, t)


def _offset(stats: S2Stats) -> float:
    if not stats.alpha > 0:
        raise ValueError(f"alpha must be positive, got {stats.alpha}")
    return -stats.beta / stats.alpha


def shift_squeeze(x, stats: S2Stats) -> np.ndarray:
    """Y = sign(X) * 2^(alpha*log2|X| + beta), computed in the log domain in binary64.

    Zeros pass through with their sign.  Magnitudes beyond binary32 range
    saturate to the largest finite binary32.
    """
    arr = _as_f32(x)
    whole, rest = _split_offset(_offset(stats))
    out = np.zeros(arr.shape, dtype=np.float64)
    nz = arr != 0
    e, frac = _split_log2(np.abs(arr[nz]))
    v = stats.alpha * ((e - whole).astype(np.float64) + (frac - rest))
    v = np.minimum(v, _LOG2_F32_MAX)
    out[nz] = np.exp2(v)
    out = np.minimum(out, _F32_MAX)
    return np.copysign(out, arr).astype(np.float32)


def inverse_shift_squeeze(y, stats: S2Stats) -> np.ndarray:
    """X = sign(Y) * 2^((log2|Y| - beta) / alpha)."""
    arr = _as_f32(y)
    whole, rest = _split_offset(_offset(stats))
    out = np.zeros(arr.shape, dtype=np.float64)
    nz = arr != 0
    e, frac = _split_log2(np.abs(arr[nz]))
    v = (e.astype(np.float64) + frac) / stats.alpha + rest
    # the integer part of the offset is applied exactly
    mag = np.ldexp(np.exp2(np.minimum(v, 400.0)), whole)
    out[nz] = np.minimum(mag, _F32_MAX)
    return np.copysign(out, arr).astype(np.float32)


def s2fp8_truncate(x, target_max: float = DEFAULT_TARGET_MAX) -> np.ndarray:
    """Round a tensor through S2FP8: transform, FP8 RNE, inverse transform."""
    arr = _as_f32(x)
    stats = compute_statistics(arr, target_max)
    if stats.n_nonzero == 0:
        return arr.copy()
    y = truncate_tensor(shift_squeeze(arr, stats), FP8)
    return inverse_shift_squeeze(y, stats)


def encode(x, target_max: float = DEFAULT_TARGET_MAX, stats: S2Stats | None = None) -> S2Encoded:
    """FP8 codes of the transformed tensor plus its statistics.

    Pass ``stats`` to encode against existing statistics instead of
    recomputing them; re-encoding a decoded tensor that way reproduces its
    codes exactly.
    """
    arr = _as_f32(x)
    if stats is None:
        stats = compute_statistics(arr, target_max)
    y = truncate_tensor(shift_squeeze(arr, stats), FP8)
    return S2Encoded(stats, encode_bits(y.reshape(-1), FP8), tuple(arr.shape))


def decode(enc: S2Encoded) -> np.ndarray:
    y = decode_bits(np.asarray(enc.codes, dtype=np.uint8), FP8)
    if enc.stats.n_nonzero == 0:
        return y.reshape(enc.shape)
    return inverse_shift_squeeze(y, enc.stats).reshape(enc.shape)


# --- S2F8 container -------------------------------------------------------

MAGIC = b"S2F8"
VERSION = 1
_HEADER = struct.Struct("<4sBdddQI")


def dumps(enc: S2Encoded) -> bytes:
    s = enc.stats
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, s.target_max, s.alpha, s.beta, s.n_nonzero, len(enc.shape)))
    buf.write(struct.pack(f"<{len(enc.shape)}I", *enc.shape))
    buf.write(np.asarray(enc.codes, dtype=np.uint8).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> S2Encoded:
    if len(data) < _HEADER.size:
        raise ValueError("S2F8 data truncated in header")
    magic, version, target_max, alpha, beta, n_nonzero, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"bad S2F8 magic {magic!r} at offset 0")
    if version != VERSION:
        raise ValueError(f"unsupported S2F8 version {version} at offset 4")
    off = _HEADER.size
    if len(data) < off + 4 * rank:
        raise ValueError(f"S2F8 data truncated in dims at offset {off}")
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != off + count:
        raise ValueError(f"S2F8 payload has {len(data) - off} bytes, expected {count}")
    codes = np.frombuffer(data, dtype=np.uint8, count=count, offset=off).copy()
    # mu and m are not stored; rebuilt from alpha, beta as if non-degenerate
    if n_nonzero:
        mu = -beta / alpha
        stats = S2Stats(mu, mu + target_max / alpha, alpha, beta, n_nonzero, target_max)
    else:
        stats = S2Stats(0.0, 0.0, alpha, beta, 0, target_max)
    return S2Encoded(stats, codes, tuple(shape))


def save(path, enc: S2Encoded) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(enc))


def load(path) -> S2Encoded:
    with open(path, "rb") as fh:
        return loads(fh.read())


__all__ = [
    "S2Stats",
    "S2Encoded",
    "NonFiniteError",
    "compute_statistics",
    "shift_squeeze",
    "inverse_shift_squeeze",
    "s2fp8_truncate",
    "encode",
    "decode",
    "dumps",
    "loads",
    "save",
    "load",
]

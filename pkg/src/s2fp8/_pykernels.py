"""Pure numpy fallback for the hot kernels.

Both functions here are mirrored one-for-one in ``_ckernels.pyx`` and must
stay bit-identical to it; ``tests/test_backends.py`` enforces that.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def round_to_format(x: np.ndarray, exp_bits: int, man_bits: int) -> np.ndarray:
    """Round finite binary32 values to the nearest (ties-to-even) value of a
    narrower IEEE-like format, saturating at its max normal.

    Works on the binary32 bit pattern: the 24-bit significand is shifted right
    by however many bits the target format cannot hold at that magnitude and
    rounded with round/sticky logic.  Requires ``exp_bits <= 8`` and
    ``man_bits <= 23`` so every result is binary32-exact.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    bias = (1 << (exp_bits - 1)) - 1
    emin = 1 - bias
    max_normal = (2.0 - 2.0 ** -man_bits) * 2.0 ** bias

    bits = x.view(np.uint32).astype(np.int64)
    negative = (bits >> 31) != 0
    exp32 = (bits >> 23) & 0xFF
    frac = bits & 0x7FFFFF

    normal = exp32 != 0
    sig = np.where(normal, frac | 0x800000, frac)
    lsb = np.where(normal, exp32 - 150, -149)
    # binary32 subnormals are always below the target's min normal
    unbiased = np.where(normal, exp32 - 127, emin - 1)
    quantum = np.maximum(unbiased, emin) - man_bits

    shift = quantum - lsb
    exact = shift <= 0
    # sig < 2**24, so any shift of 25 or more rounds to zero
    s = np.clip(shift, 1, 25)
    kept = sig >> s
    rem = sig & ((np.int64(1) << s) - 1)
    half = np.int64(1) << (s - 1)
    up = (rem > half) | ((rem == half) & ((kept & 1) == 1))
    kept = kept + up

    mag = np.where(
        exact,
        np.abs(x.astype(np.float64)),
        np.ldexp(kept.astype(np.float64), quantum.astype(np.int32)),
    )
    mag = np.minimum(mag, max_normal)
    out = np.where(negative, -mag, mag).astype(np.float32)
    return out.reshape(x.shape)


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B with binary64 accumulation in strict k order.

    Every product of two binary32 values is exact in binary64, so the only
    rounding is the running sum, done in the same order as a naive loop.
    """
    m, k = a.shape
    n = b.shape[1]
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    acc = np.zeros((m, n), dtype=np.float64)
    for kk in range(k):
        acc += a64[:, kk : kk + 1] * b64[kk : kk + 1, :]
    # overflow becomes inf, as in the compiled kernel; callers check finiteness
    with np.errstate(over="ignore"):
        return acc.astype(a.dtype)

"""Dense binary32 tensors (plain numpy arrays) and the numerical kernels under the
training engine.

Layout conventions: row-major everywhere, NHWC activations, RSCF conv filters.
"""

from __future__ import annotations

import struct

import numpy as np

from . import _pykernels
from ._backend import kernels
from .formats import _require_finite


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def check_finite(x: np.ndarray) -> np.ndarray:
    """Raise NonFiniteError on the first NaN/inf, else return ``x``."""
    _require_finite(np.asarray(x))
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic GEMM: binary64 accumulation in increasing-k order.

    binary32 inputs go through the active kernel backend; binary64 inputs
    (used by the gradient checker) use the numpy path.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype == np.float64 or b.dtype == np.float64:
        return _pykernels.gemm(a.astype(np.float64), b.astype(np.float64))
    return kernels.gemm(np.ascontiguousarray(a, np.float32), np.ascontiguousarray(b, np.float32))


# --- convolution -----------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"size {size} incompatible with kernel {k}, stride {stride}, pad {pad}")
    return span // stride + 1


def im2col(x: np.ndarray, r: int, s: int, stride: int, pad: int) -> np.ndarray:
    """(N, H, W, C) -> (N*OH*OW, R*S*C); column order is (r, s, c)."""
    n, h, w, c = x.shape
    oh = conv_output_size(h, r, stride, pad)
    ow = conv_output_size(w, s, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    sn, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, r, s, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, r * s * c)


def col2im(cols: np.ndarray, x_shape, r: int, s: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back, in fixed (r, s) order."""
    n, h, w, c = x_shape
    oh = conv_output_size(h, r, stride, pad)
    ow = conv_output_size(w, s, stride, pad)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    patches = cols.reshape(n, oh, ow, r, s, c)
    for i in range(r):
        for j in range(s):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += patches[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(out)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of NHWC ``x`` with RSCF ``w`` lowered to one GEMM."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d needs NHWC input and RSCF filters, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    r, s, cw, f = w.shape
    if c != cw:
        raise ValueError(f"input has {c} channels, filters expect {cw}")
    oh = conv_output_size(h, r, stride, pad)
    ow = conv_output_size(wd, s, stride, pad)
    cols = im2col(x, r, s, stride, pad)
    return matmul(cols, w.reshape(r * s * c, f)).reshape(n, oh, ow, f)


# --- elementwise -----------------------------------------------------------


def _binary_operands(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim and b.ndim and a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shapes {a.shape} and {b.shape} are neither equal nor scalar")
    return a, b


def relu(x):
    x = np.asarray(x)
    return np.where(x > 0, x, np.zeros_like(x))


def relu_grad(x):
    x = np.asarray(x)
    return (x > 0).astype(x.dtype)


def add(a, b):
    a, b = _binary_operands(a, b)
    return a + b


def mul(a, b):
    a, b = _binary_operands(a, b)
    return a * b


def scale(x, c):
    x = np.asarray(x)
    return x * x.dtype.type(c)


_ELEMENTWISE = {"relu": relu, "relu_grad": relu_grad, "add": add, "mul": mul, "scale": scale}


def elementwise(op: str, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- loss ------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class and its gradient w.r.t. logits.

    Computed in binary64 with max subtraction; the gradient is returned in the
    logits' dtype.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype)


# --- S2T1 tensor files -----------------------------------------------------

TENSOR_MAGIC = b"S2T1"


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float32)
    head = TENSOR_MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"bad S2T1 magic {data[:4]!r} at offset 0")
    if len(data) < 8:
        raise ValueError("S2T1 data truncated at offset 4")
    (rank,) = struct.unpack_from("<I", data, 4)
    off = 8 + 4 * rank
    if len(data) < off:
        raise ValueError(f"S2T1 dims truncated at offset 8 (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != off + 4 * count:
        raise ValueError(f"S2T1 payload at offset {off} has {len(data) - off} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())

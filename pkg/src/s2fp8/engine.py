"""Small MLP/CNN training engine with manual backprop and GEMM-boundary truncation.

Precision dataflow per dense/conv layer, forward and backward:

* both GEMM operands (activations, weights as used) are truncated before the GEMM
* the GEMM accumulates in binary64 and its output is truncated after it
* backward truncates the incoming gradient, then the produced weight and input
  gradients
* relu, bias adds, the loss and the optimizer all run in binary32
* master weights are binary32 and only ever touched by the optimizer
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import tensor as T
from .codec import DEFAULT_TARGET_MAX, S2Stats, compute_statistics, s2fp8_truncate
from .formats import FP8, NonFiniteError, truncate_tensor

log = logging.getLogger(__name__)

Trace = Optional[Callable[[str, np.ndarray], None]]


class Mode(str, Enum):
    FP32 = "fp32"
    FP8_RNE = "fp8"
    FP8_LOSS_SCALED = "fp8_ls"
    S2FP8 = "s2fp8"


@dataclass(frozen=True)
class QuantConfig:
    """Precision applied at GEMM boundaries.

    ``loss_scale`` multiplies the loss gradient before backprop and divides the
    weight gradients before the update.  It is honored in every mode (so the
    scale/unscale round trip can be checked in FP32), though it only matters
    for FP8_LOSS_SCALED.
    """

    mode: Mode = Mode.FP32
    loss_scale: float = 1.0
    target_max: float = DEFAULT_TARGET_MAX

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not (self.loss_scale > 0 and math.isfinite(self.loss_scale)):
            raise ValueError(f"loss_scale must be positive and finite, got {self.loss_scale}")


def quantize_boundary(x: np.ndarray, q: QuantConfig) -> np.ndarray:
    if q.mode is Mode.FP32:
        return x
    if q.mode is Mode.S2FP8:
        return s2fp8_truncate(x, q.target_max)
    return truncate_tensor(x, FP8)


def _emit(trace: Trace, site: str, x: np.ndarray) -> None:
    if trace is not None:
        trace(site, x)


# --- layers ------------------------------------------------------------------


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, name: str = "dense", dtype=np.float32):
        self.name = name
        self.weight = (rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / n_in)).astype(dtype)
        self.bias = np.zeros(n_out, dtype=dtype) if bias else None

    def params(self) -> dict:
        p = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            p[f"{self.name}.bias"] = self.bias
        return p

    def forward(self, x, q, trace=None):
        n = self.name
        xq = quantize_boundary(x, q)
        wq = quantize_boundary(self.weight, q)
        _emit(trace, f"{n}.in.q", xq)
        _emit(trace, f"{n}.weight.q", wq)
        y = T.matmul(xq, wq)
        _emit(trace, f"{n}.gemm", y)
        y = quantize_boundary(y, q)
        _emit(trace, f"{n}.gemm.q", y)
        if self.bias is not None:
            y = y + self.bias
        return y, (xq, wq)

    def backward(self, cache, dout, q, trace=None):
        xq, wq = cache
        n = self.name
        gq = quantize_boundary(dout, q)
        _emit(trace, f"{n}.grad_out.q", gq)
        dw = quantize_boundary(T.matmul(np.ascontiguousarray(xq.T), gq), q)
        dx = quantize_boundary(T.matmul(gq, np.ascontiguousarray(wq.T)), q)
        _emit(trace, f"{n}.grad_weight.q", dw)
        _emit(trace, f"{n}.grad_in.q", dx)
        grads = {f"{n}.weight": dw}
        if self.bias is not None:
            # biases bypass quantization
            grads[f"{n}.bias"] = dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)
        return dx, grads


class Conv2D:
    kind = "conv2d"

    def __init__(self, r: int, s: int, c: int, f: int, rng: np.random.Generator, stride: int = 1, pad: int = 0,
                 bias: bool = True, name: str = "conv", dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = pad
        fan_in = r * s * c
        self.weight = (rng.standard_normal((r, s, c, f)) * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.bias = np.zeros(f, dtype=dtype) if bias else None

    params = Dense.params

    def forward(self, x, q, trace=None):
        n = self.name
        r, s, c, f = self.weight.shape
        xq = quantize_boundary(x, q)
        wq = quantize_boundary(self.weight, q)
        _emit(trace, f"{n}.in.q", xq)
        _emit(trace, f"{n}.weight.q", wq)
        cols = T.im2col(xq, r, s, self.stride, self.pad)
        nb = x.shape[0]
        oh = T.conv_output_size(x.shape[1], r, self.stride, self.pad)
        ow = T.conv_output_size(x.shape[2], s, self.stride, self.pad)
        y = T.matmul(cols, wq.reshape(r * s * c, f)).reshape(nb, oh, ow, f)
        _emit(trace, f"{n}.gemm", y)
        y = quantize_boundary(y, q)
        _emit(trace, f"{n}.gemm.q", y)
        if self.bias is not None:
            y = y + self.bias
        return y, (x.shape, cols, wq)

    def backward(self, cache, dout, q, trace=None):
        x_shape, cols, wq = cache
        n = self.name
        r, s, c, f = wq.shape
        gq = quantize_boundary(dout, q)
        _emit(trace, f"{n}.grad_out.q", gq)
        g2 = gq.reshape(-1, f)
        dw = T.matmul(np.ascontiguousarray(cols.T), g2).reshape(r, s, c, f)
        dw = quantize_boundary(dw, q)
        dcols = T.matmul(g2, np.ascontiguousarray(wq.reshape(r * s * c, f).T))
        dx = quantize_boundary(T.col2im(dcols, x_shape, r, s, self.stride, self.pad), q)
        _emit(trace, f"{n}.grad_weight.q", dw)
        _emit(trace, f"{n}.grad_in.q", dx)
        grads = {f"{n}.weight": dw}
        if self.bias is not None:
            grads[f"{n}.bias"] = dout.reshape(-1, f).sum(axis=0, dtype=np.float64).astype(dout.dtype)
        return dx, grads


class ReLU:
    kind = "relu"

    def __init__(self, name: str = "relu"):
        self.name = name

    def params(self) -> dict:
        return {}

    def forward(self, x, q, trace=None):
        y = T.relu(x)
        _emit(trace, f"{self.name}.out", y)
        return y, x

    def backward(self, cache, dout, q, trace=None):
        dx = dout * T.relu_grad(cache)
        _emit(trace, f"{self.name}.grad_in", dx)
        return dx, {}


class Flatten:
    kind = "flatten"

    def __init__(self, name: str = "flatten"):
        self.name = name

    def params(self) -> dict:
        return {}

    def forward(self, x, q, trace=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout, q, trace=None):
        return dout.reshape(cache), {}


class Model:
    def __init__(self, layers):
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")

    def parameters(self) -> dict:
        """Master weights by reference, in layer order."""
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def gemm_layers(self):
        return [layer for layer in self.layers if layer.kind in ("dense", "conv2d")]


def build_mlp(sizes, rng: np.random.Generator, bias: bool = True, dtype=np.float32) -> Model:
    """Dense/ReLU stack; ``sizes`` = [input, hidden..., classes]."""
    layers = []
    n_dense = len(sizes) - 1
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b, rng, bias=bias, name=f"dense{i}", dtype=dtype))
        if i < n_dense - 1:
            layers.append(ReLU(name=f"relu{i}"))
    return Model(layers)


def build_cnn(image_shape, filters: int, kernel: int, hidden, n_classes: int, rng: np.random.Generator,
              stride: int = 1, pad: int = 0, bias: bool = True, dtype=np.float32) -> Model:
    """One conv layer, ReLU, flatten, then an MLP head."""
    h, w, c = image_shape
    conv = Conv2D(kernel, kernel, c, filters, rng, stride=stride, pad=pad, bias=bias, name="conv0", dtype=dtype)
    oh = T.conv_output_size(h, kernel, stride, pad)
    ow = T.conv_output_size(w, kernel, stride, pad)
    head = build_mlp([oh * ow * filters, *hidden, n_classes], rng, bias=bias, dtype=dtype)
    return Model([conv, ReLU(name="relu_conv"), Flatten(), *head.layers])


def forward(model: Model, batch: np.ndarray, q: QuantConfig, trace: Trace = None):
    caches = []
    x = batch
    for layer in model.layers:
        x, cache = layer.forward(x, q, trace)
        caches.append(cache)
    return x, caches


def backward(model: Model, caches, loss_grad: np.ndarray, q: QuantConfig, trace: Trace = None) -> dict:
    """Gradients of every parameter, still multiplied by ``q.loss_scale``."""
    if len(caches) != len(model.layers):
        raise ValueError(f"{len(caches)} caches for {len(model.layers)} layers")
    g = loss_grad
    if q.loss_scale != 1.0:
        g = g * g.dtype.type(q.loss_scale)
    grads = {}
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        g, layer_grads = layer.backward(cache, g, q, trace)
        grads.update(layer_grads)
    return grads


# --- optimizers ----------------------------------------------------------------


@dataclass
class LRSchedule:
    """Step decay: ``base * gamma**k`` after the k-th milestone epoch."""

    base: float
    milestones: tuple = ()
    gamma: float = 0.1

    def __call__(self, epoch: int) -> float:
        return self.base * self.gamma ** sum(epoch >= m for m in self.milestones)


@dataclass
class SGDMomentum:
    lr: LRSchedule
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)
    kind: str = "sgd_momentum"

    def update(self, name: str, w: np.ndarray, g: np.ndarray, epoch: int) -> None:
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = np.zeros_like(w)
        f = w.dtype.type
        v *= f(self.momentum)
        v += g
        w -= f(self.lr(epoch)) * v


@dataclass
class Adam:
    lr: LRSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    kind: str = "adam"

    def update(self, name: str, w: np.ndarray, g: np.ndarray, epoch: int) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(w)
            self.v[name] = np.zeros_like(w)
            self.t[name] = 0
        f = w.dtype.type
        t = self.t[name] = self.t[name] + 1
        m, v = self.m[name], self.v[name]
        m *= f(self.beta1)
        m += f(1 - self.beta1) * g
        v *= f(self.beta2)
        v += f(1 - self.beta2) * (g * g)
        mhat = m / f(1 - self.beta1**t)
        vhat = v / f(1 - self.beta2**t)
        w -= f(self.lr(epoch)) * mhat / (np.sqrt(vhat) + f(self.eps))


def make_optimizer(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind", "sgd_momentum")
    lr = LRSchedule(float(spec.pop("lr", 0.05)), tuple(spec.pop("milestones", ())), float(spec.pop("gamma", 0.1)))
    if kind == "sgd_momentum":
        return SGDMomentum(lr, momentum=float(spec.pop("momentum", 0.9)))
    if kind == "adam":
        return Adam(lr, beta1=float(spec.pop("beta1", 0.9)), beta2=float(spec.pop("beta2", 0.999)),
                    eps=float(spec.pop("eps", 1e-8)))
    raise ValueError(f"unknown optimizer kind {kind!r}")


def apply_update(params: dict, grads: dict, opt, q: QuantConfig, epoch: int = 0) -> None:
    """Unscale gradients by the loss scale and step the binary32 master weights in place."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, weight has {w.shape}")
        if q.loss_scale != 1.0:
            g = g / g.dtype.type(q.loss_scale)
        opt.update(name, w, g, epoch)


# --- training loop ---------------------------------------------------------------


class StatRecord(NamedTuple):
    """Per-step S2FP8 statistics of a tracked tensor."""

    mu: float
    m: float
    alpha: float
    beta: float

    @classmethod
    def of(cls, s: S2Stats) -> "StatRecord":
        return cls(s.mu, s.m, s.alpha, s.beta)


@dataclass
class RunMetrics:
    step: int
    epoch: int
    loss: float
    accuracy: float
    batch_hash: str
    stats: dict  # tracked tensor name -> StatRecord


@dataclass
class RunResult:
    metrics: list
    status: str = "ok"
    error: str = ""


def default_tracked(model: Model, cap: int = 8) -> list:
    names = []
    for layer in model.gemm_layers():
        names += [f"{layer.name}.weight", f"{layer.name}.weight.grad"]
    return names[:cap]


def batch_hash(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()


def predict(model: Model, x: np.ndarray, q: QuantConfig, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward(model, x[i : i + batch_size], q)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, q: QuantConfig, batch_size: int = 256) -> float:
    """Percent of correct argmax predictions under the given precision mode."""
    if len(x) == 0:
        return float("nan")
    try:
        return 100.0 * float(np.mean(predict(model, x, q, batch_size) == y))
    except NonFiniteError:
        return float("nan")


def train(model: Model, x: np.ndarray, y: np.ndarray, opt, q: QuantConfig, epochs: int, batch_size: int = 64,
          seed: int = 0, track=None, loss_multiplier: float = 1.0, trace: Trace = None) -> RunResult:
    """Minibatch training over shuffled data; one RunMetrics per step.

    The batch order depends only on ``seed`` so every mode sees the same
    batches.  ``loss_multiplier`` rescales the objective itself (all modes
    alike), which is how tiny-gradient regimes are provoked.  A non-finite
    loss stops the run with status "diverged".
    """
    rng = np.random.default_rng(seed)
    params = model.parameters()
    tracked = default_tracked(model) if track is None else list(track)
    for name in tracked:
        base = name[:-5] if name.endswith(".grad") else name
        if base not in params:
            raise ValueError(f"cannot track unknown tensor {name!r}")
    metrics = []
    step = 0
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            try:
                logits, caches = forward(model, xb, q, trace)
                T.check_finite(logits)
                loss, dlogits = T.softmax_cross_entropy(logits, yb)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"loss became {loss}")
                if loss_multiplier != 1.0:
                    dlogits = dlogits * dlogits.dtype.type(loss_multiplier)
                grads = backward(model, caches, dlogits, q, trace)
                stats = {}
                for name in tracked:
                    if name.endswith(".grad"):
                        s = compute_statistics(grads[name[:-5]], q.target_max)
                    else:
                        s = compute_statistics(params[name], q.target_max)
                    stats[name] = StatRecord.of(s)
                apply_update(params, grads, opt, q, epoch)
            except (NonFiniteError, FloatingPointError) as exc:
                log.warning("run diverged at step %d: %s", step, exc)
                return RunResult(metrics, "diverged", str(exc))
            acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == yb))
            metrics.append(RunMetrics(step, epoch, loss, acc, batch_hash(xb, yb), stats))
            step += 1
    return RunResult(metrics)


def check_gradients(loss_fn: Callable[[], float], params: dict, grads: dict, eps: float = 1e-6,
                    floor: float = 1e-8) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn`` re-evaluates the loss reading ``params`` in place; each entry
    is perturbed by +-eps and restored.
    """
    worst = 0.0
    for name, w in params.items():
        g = grads[name]
        flat = w.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), floor)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


def model_gradcheck(model: Model, x: np.ndarray, y: np.ndarray, eps: float = 1e-6, backward_fn=None) -> float:
    """FP32-mode backprop versus central differences on every parameter.

    Run it on a model built with ``dtype=np.float64`` so the finite
    differences are not swamped by binary32 rounding.  ``backward_fn`` lets
    tests inject a broken backward pass.
    """
    q = QuantConfig(Mode.FP32)
    bwd = backward_fn or backward
    logits, caches = forward(model, x, q)
    _, dlogits = T.softmax_cross_entropy(logits, y)
    grads = bwd(model, caches, dlogits, q)

    def loss_fn():
        return T.softmax_cross_entropy(forward(model, x, q)[0], y)[0]

    return check_gradients(loss_fn, model.parameters(), grads, eps)


__all__ = [
    "Mode", "QuantConfig", "quantize_boundary", "Dense", "Conv2D", "ReLU", "Flatten", "Model",
    "build_mlp", "build_cnn", "forward", "backward", "LRSchedule", "SGDMomentum", "Adam",
    "make_optimizer", "apply_update", "StatRecord", "RunMetrics", "RunResult", "train", "accuracy", "predict",
    "default_tracked", "batch_hash", "check_gradients", "model_gradcheck", "S2Stats",
]

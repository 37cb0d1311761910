"""Dataset ingestion: IDX image/label files and seeded synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAX_ELEMENTS = 1 << 31


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])


def parse_idx(data: bytes) -> np.ndarray:
    """IDX bytes to an array: rank-3 uint8 images scaled to [0, 1] float32, or int64 labels."""
    if len(data) < 4:
        raise IDXError("IDX data truncated at offset 0")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_IMAGES:
        rank = 3
    elif magic == IDX_LABELS:
        rank = 1
    else:
        raise IDXError(f"bad IDX magic {magic:#010x} at offset 0")
    end = 4 + 4 * rank
    if len(data) < end:
        raise IDXError(f"IDX dims truncated at offset {len(data)}")
    dims = struct.unpack_from(f">{rank}I", data, 4)
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise IDXError(f"IDX dims {dims} overflow the element limit")
    if len(data) < end + count:
        raise IDXError(f"IDX payload truncated at offset {len(data)}: need {count} bytes after offset {end}")
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=end).reshape(dims)
    if rank == 3:
        return raw.astype(np.float32) / np.float32(255.0)
    return raw.astype(np.int64)


def load_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, arr: np.ndarray) -> None:
    """Write uint8 images (rank 3) or labels (rank 1) in IDX layout."""
    arr = np.asarray(arr)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}.get(arr.ndim)
    if magic is None:
        raise ValueError("IDX writer supports rank-3 images or rank-1 labels")
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{arr.ndim}I", magic, *arr.shape))
        fh.write(arr.astype(np.uint8).tobytes())


def blobs(n: int, n_features: int, n_classes: int, rng: np.random.Generator, separation: float = 10.0,
          sigma: float = 1.0, centers=None):
    """Isotropic Gaussian clusters whose centers are pairwise ``separation * sigma`` apart.

    Centers sit on scaled orthogonal axes (needs ``n_features >= n_classes``),
    so class means are exactly equidistant.
    """
    if centers is None:
        if n_features < n_classes:
            raise ValueError("blobs need n_features >= n_classes")
        basis = np.linalg.qr(rng.standard_normal((n_features, n_classes)))[0].T
        centers = basis * (separation * sigma / np.sqrt(2.0))
    y = rng.integers(0, n_classes, size=n)
    x = centers[y] + sigma * rng.standard_normal((n, n_features))
    return x.astype(np.float32), y.astype(np.int64), centers


def log_uniform_spectrum(n: int, n_features: int, n_classes: int, rng: np.random.Generator, log2_range=(-40.0, -20.0),
                         flip_prob: float = 0.0, prototypes=None):
    """Sign-pattern classes with log2 magnitudes uniform on ``log2_range``.

    Each class owns a random +-1 prototype; a sample copies its class's signs
    (each flipped with ``flip_prob``) onto magnitudes 2^u, u ~ U(log2_range).
    """
    lo, hi = log2_range
    if prototypes is None:
        prototypes = rng.choice([-1.0, 1.0], size=(n_classes, n_features))
    y = rng.integers(0, n_classes, size=n)
    signs = prototypes[y] * np.where(rng.random((n, n_features)) < flip_prob, -1.0, 1.0)
    mags = np.exp2(rng.uniform(lo, hi, size=(n, n_features)))
    return (signs * mags).astype(np.float32), y.astype(np.int64), prototypes


def gen_synthetic(spec: dict, seed: int) -> Dataset:
    """Deterministic train/val split for a synthetic spec (kind "blobs" or "log_uniform_spectrum")."""
    spec = dict(spec)
    kind = spec.get("kind")
    n_train = int(spec.get("n_train", 2048))
    n_val = int(spec.get("n_val", 512))
    n_features = int(spec.get("n_features", 16))
    n_classes = int(spec.get("n_classes", 4))
    if n_train <= 0 or n_val < 0 or n_features <= 0 or n_classes < 2:
        raise ValueError(f"invalid dataset sizes in {spec}")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        sep = float(spec.get("separation", 10.0))
        sigma = float(spec.get("sigma", 1.0))
        xt, yt, centers = blobs(n_train, n_features, n_classes, rng, sep, sigma)
        xv, yv, _ = blobs(n_val, n_features, n_classes, rng, sep, sigma, centers=centers)
    elif kind == "log_uniform_spectrum":
        lo, hi = (float(v) for v in spec.get("log2_range", (-40.0, -20.0)))
        if not lo < hi:
            raise ValueError(f"log2_range must be increasing, got {(lo, hi)}")
        flip = float(spec.get("flip_prob", 0.0))
        xt, yt, protos = log_uniform_spectrum(n_train, n_features, n_classes, rng, (lo, hi), flip)
        xv, yv, _ = log_uniform_spectrum(n_val, n_features, n_classes, rng, (lo, hi), flip, prototypes=protos)
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    return Dataset(xt, yt, xv, yv, n_classes)


def load_idx_dataset(spec: dict) -> Dataset:
    xt = load_idx(spec["train_images"])
    yt = load_idx(spec["train_labels"])
    if "val_images" in spec:
        xv = load_idx(spec["val_images"])
        yv = load_idx(spec["val_labels"])
    else:
        xv, yv = xt[:0], yt[:0]
    if xt.ndim != 3 or yt.ndim != 1 or len(xt) != len(yt) or len(xv) != len(yv):
        raise IDXError("IDX image/label files do not pair up")
    n_classes = int(spec.get("n_classes", int(max(yt.max(initial=0), yv.max(initial=0))) + 1))
    return Dataset(xt[..., None], yt, xv[..., None], yv, n_classes)

"""Experiment configuration, multi-mode runs, metrics.csv / summary.json output.

Config documents are JSON::

    {
      "name": "blobs",
      "seed": 0,                                  # mandatory
      "dataset": {"kind": "blobs", "n_train": 2048, "n_val": 512,
                  "n_features": 16, "n_classes": 4, "separation": 10.0},
      "model": {"hidden": [64, 64], "bias": true,
                "conv": {"filters": 4, "kernel": 3, "stride": 1, "pad": 1}},   # conv optional
      "optimizer": {"kind": "sgd_momentum", "lr": 0.05, "momentum": 0.9},
      "runs": [{"id": "fp32", "mode": "fp32"},
               {"id": "s2fp8", "mode": "s2fp8", "target_max": 15},
               {"id": "fp8", "mode": "fp8"},
               {"id": "fp8_ls100", "mode": "fp8_ls", "loss_scale": 100}],
      "reference_run": "fp32",
      "epochs": 5, "batch_size": 64,
      "loss_multiplier": 1.0,                     # optional, rescales the objective in every run
      "track": null,                              # null = every GEMM weight and its gradient (max 8)
      "workers": 1,
      "out_dir": "out/blobs"                      # optional, the CLI flag wins
    }

Dataset kinds: "blobs", "log_uniform_spectrum" (``log2_range``, ``flip_prob``)
and "idx" (``train_images``, ``train_labels``, optional ``val_images``,
``val_labels``).
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import engine as E
from ._backend import BACKEND

CSV_FIXED = ["run_id", "step", "loss", "accuracy"]
CSV_TRAILER = ["epoch", "batch_hash"]
STAT_FIELDS = ("mu", "m", "alpha", "beta")
MAX_TRACKED = 8


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit status 1)."""


@dataclass
class RunSpec:
    id: str
    quant: E.QuantConfig


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    dataset: dict
    model: dict
    optimizer: dict
    runs: list
    epochs: int = 5
    batch_size: int = 64
    loss_multiplier: float = 1.0
    track: list | None = None
    reference_run: str | None = None
    workers: int = 1
    out_dir: str | None = None
    base_dir: str = field(default=".", repr=False)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if "seed" not in doc or not isinstance(doc["seed"], int):
            raise ConfigError("config needs an integer 'seed'")
        for key in ("dataset", "runs"):
            if key not in doc:
                raise ConfigError(f"config is missing {key!r}")
        runs = []
        for i, r in enumerate(doc["runs"]):
            try:
                q = E.QuantConfig(
                    E.Mode(r["mode"]),
                    loss_scale=float(r.get("loss_scale", 1.0)),
                    target_max=float(r.get("target_max", 15.0)),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"run #{i}: {exc}") from None
            runs.append(RunSpec(str(r.get("id", q.mode.value)), q))
        if not runs:
            raise ConfigError("config has no runs")
        ids = [r.id for r in runs]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"run ids must be unique: {ids}")
        ref = doc.get("reference_run", ids[0])
        if ref not in ids:
            raise ConfigError(f"reference_run {ref!r} is not a run id")
        cfg = cls(
            name=str(doc.get("name", "experiment")),
            seed=doc["seed"],
            dataset=dict(doc["dataset"]),
            model=dict(doc.get("model", {})),
            optimizer=dict(doc.get("optimizer", {"kind": "sgd_momentum", "lr": 0.05, "momentum": 0.9})),
            runs=runs,
            epochs=int(doc.get("epochs", 5)),
            batch_size=int(doc.get("batch_size", 64)),
            loss_multiplier=float(doc.get("loss_multiplier", 1.0)),
            track=doc.get("track"),
            reference_run=ref,
            workers=int(doc.get("workers", 1)),
            out_dir=doc.get("out_dir"),
            base_dir=str(base_dir),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs, batch_size and workers must be positive")
        if not (self.loss_multiplier > 0 and math.isfinite(self.loss_multiplier)):
            raise ConfigError("loss_multiplier must be positive and finite")
        if self.track is not None and len(self.track) > MAX_TRACKED:
            raise ConfigError(f"at most {MAX_TRACKED} tracked tensors")
        try:
            E.make_optimizer(self.optimizer)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        kind = self.dataset.get("kind")
        if kind == "idx":
            for key in ("train_images", "train_labels", "val_images", "val_labels"):
                if key in self.dataset:
                    path = self.resolve(self.dataset[key])
                    if not path.is_file():
                        raise FileNotFoundError(f"dataset file {path} does not exist")
            if "train_images" not in self.dataset or "train_labels" not in self.dataset:
                raise ConfigError("idx dataset needs train_images and train_labels")
        elif kind not in ("blobs", "log_uniform_spectrum"):
            raise ConfigError(f"unknown dataset kind {kind!r}")

    def resolve(self, p) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset,
            "model": self.model,
            "optimizer": self.optimizer,
            "runs": [
                {"id": r.id, "mode": r.quant.mode.value, "loss_scale": r.quant.loss_scale, "target_max": r.quant.target_max}
                for r in self.runs
            ],
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "loss_multiplier": self.loss_multiplier,
            "track": self.track,
            "reference_run": self.reference_run,
            "workers": self.workers,
        }


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


def load_dataset(cfg: ExperimentConfig) -> D.Dataset:
    if cfg.dataset["kind"] == "idx":
        spec = {k: (str(cfg.resolve(v)) if k.endswith(("_images", "_labels")) else v) for k, v in cfg.dataset.items()}
        return D.load_idx_dataset(spec)
    try:
        return D.gen_synthetic(cfg.dataset, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_model(cfg: ExperimentConfig, ds: D.Dataset, dtype=np.float32) -> E.Model:
    rng = np.random.default_rng(cfg.seed + 1)
    m = cfg.model
    hidden = list(m.get("hidden", [64, 64]))
    bias = bool(m.get("bias", True))
    conv = m.get("conv")
    if conv:
        shape = ds.input_shape
        if len(shape) != 3:
            raise ConfigError(f"conv model needs HWC inputs, dataset gives {shape}")
        return E.build_cnn(shape, int(conv.get("filters", 4)), int(conv.get("kernel", 3)), hidden, ds.n_classes, rng,
                           stride=int(conv.get("stride", 1)), pad=int(conv.get("pad", 0)), bias=bias, dtype=dtype)
    n_in = int(np.prod(ds.input_shape))
    return E.build_mlp([n_in, *hidden, ds.n_classes], rng, bias=bias, dtype=dtype)


def _inputs(cfg: ExperimentConfig, x: np.ndarray) -> np.ndarray:
    if cfg.model.get("conv"):
        return x
    return x.reshape(len(x), int(np.prod(x.shape[1:])))


def csv_header(tracked) -> list:
    cols = list(CSV_FIXED)
    for name in tracked:
        cols += [f"{name}.{f}" for f in STAT_FIELDS]
    return cols + CSV_TRAILER


def write_run_csv(path, run_id: str, metrics, tracked, header=True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(csv_header(tracked))
        for rec in metrics:
            row = [run_id, rec.step, repr(rec.loss), repr(rec.accuracy)]
            for name in tracked:
                s = rec.stats[name]
                row += [repr(float(getattr(s, f))) for f in STAT_FIELDS]
            row += [rec.epoch, rec.batch_hash]
            w.writerow(row)


def read_metrics_csv(path) -> dict:
    """metrics.csv back into {run_id: [RunMetrics, ...]}."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != CSV_FIXED or header[-2:] != CSV_TRAILER:
            raise ValueError(f"{path}: unexpected header {header}")
        stat_cols = header[4:-2]
        if len(stat_cols) % 4:
            raise ValueError(f"{path}: statistics columns are not in groups of four")
        names = [c.rsplit(".", 1)[0] for c in stat_cols[::4]]
        for row in reader:
            stats = {}
            for i, name in enumerate(names):
                vals = [float(v) for v in row[4 + 4 * i : 8 + 4 * i]]
                stats[name] = E.StatRecord(*vals)
            rec = E.RunMetrics(int(row[1]), int(row[-2]), float(row[2]), float(row[3]), row[-1], stats)
            out.setdefault(row[0], []).append(rec)
    return out


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def execute_run(cfg: ExperimentConfig, run: RunSpec, out_dir) -> dict:
    """Train one run; writes runs/<id>.csv and returns its summary entry."""
    ds = load_dataset(cfg)
    model = build_model(cfg, ds)
    xt, xv = _inputs(cfg, ds.x_train), _inputs(cfg, ds.x_val)
    tracked = cfg.track if cfg.track is not None else E.default_tracked(model, MAX_TRACKED)
    opt = E.make_optimizer(cfg.optimizer)
    res = E.train(model, xt, ds.y_train, opt, run.quant, cfg.epochs, cfg.batch_size, seed=cfg.seed + 2,
                  track=tracked, loss_multiplier=cfg.loss_multiplier)
    run_dir = Path(out_dir) / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_csv(run_dir / f"{run.id}.csv", run.id, res.metrics, tracked)
    if res.status == "ok":
        train_acc = E.accuracy(model, xt, ds.y_train, run.quant)
        val_acc = E.accuracy(model, xv, ds.y_val, run.quant) if len(xv) else train_acc
    else:
        train_acc = val_acc = float("nan")
    last = res.metrics[-1] if res.metrics else None
    return {
        "id": run.id,
        "mode": run.quant.mode.value,
        "loss_scale": run.quant.loss_scale,
        "target_max": run.quant.target_max,
        "status": res.status,
        "error": res.error,
        "steps": len(res.metrics),
        "final_loss": _nan_to_none(last.loss) if last else None,
        "train_accuracy": _nan_to_none(train_acc),
        "val_accuracy": _nan_to_none(val_acc),
    }


def _execute_run_from_dict(doc: dict, base_dir: str, run_index: int, out_dir: str) -> dict:
    cfg = ExperimentConfig.from_dict(doc, base_dir)
    return execute_run(cfg, cfg.runs[run_index], out_dir)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run every configured mode on identical data, init and batch order.

    Writes ``metrics.csv`` (all runs, config order) and ``summary.json``;
    returns the summary.  A diverged run is a result, not an error.
    """
    out = Path(out_dir or cfg.out_dir or f"out/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1 and len(cfg.runs) > 1:
        doc = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = [pool.submit(_execute_run_from_dict, doc, cfg.base_dir, i, str(out)) for i in range(len(cfg.runs))]
            entries = [f.result() for f in futs]
    else:
        entries = [execute_run(cfg, r, out) for r in cfg.runs]

    # single-writer merge of the per-run files
    with open(out / "metrics.csv", "w", newline="") as dst:
        for i, r in enumerate(cfg.runs):
            with open(out / "runs" / f"{r.id}.csv", newline="") as src:
                lines = src.readlines()
            dst.writelines(lines if i == 0 else lines[1:])

    ref = next(e for e in entries if e["id"] == cfg.reference_run)
    for e in entries:
        if ref["val_accuracy"] is not None and e["val_accuracy"] is not None:
            e["delta_vs_reference"] = ref["val_accuracy"] - e["val_accuracy"]
        else:
            e["delta_vs_reference"] = None
    summary = {
        "name": cfg.name,
        "seed": cfg.seed,
        "backend": BACKEND,
        "reference_run": cfg.reference_run,
        "metric": "val_accuracy_percent",
        "runs": entries,
        "table": {e["id"]: ("NaN" if e["status"] == "diverged" else e["val_accuracy"]) for e in entries},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


# --- gradient check ----------------------------------------------------------


def checkgrad(doc: dict) -> dict:
    """Central-difference check of FP32 backprop on a small binary64 model.

    Config keys: seed, model {"sizes": [in, hidden..., classes], "bias"} or a
    CNN {"image_shape", "conv", "hidden", "n_classes"}, batch_size, eps,
    threshold (default 1e-4).
    """
    if "seed" not in doc:
        raise ConfigError("checkgrad config needs a 'seed'")
    seed = int(doc["seed"])
    rng = np.random.default_rng(seed)
    m = doc.get("model", {"sizes": [6, 12, 3]})
    batch = int(doc.get("batch_size", 8))
    if "conv" in m:
        shape = tuple(m["image_shape"])
        conv = m["conv"]
        n_classes = int(m["n_classes"])
        model = E.build_cnn(shape, int(conv.get("filters", 2)), int(conv.get("kernel", 3)), m.get("hidden", []),
                            n_classes, rng, stride=int(conv.get("stride", 1)), pad=int(conv.get("pad", 0)),
                            bias=bool(m.get("bias", True)), dtype=np.float64)
        x = rng.standard_normal((batch, *shape))
    else:
        sizes = [int(s) for s in m["sizes"]]
        n_classes = sizes[-1]
        model = E.build_mlp(sizes, rng, bias=bool(m.get("bias", True)), dtype=np.float64)
        x = rng.standard_normal((batch, sizes[0]))
    n_params = model.n_parameters()
    if n_params > 1000:
        raise ConfigError(f"checkgrad model has {n_params} parameters; limit is 1000")
    y = rng.integers(0, n_classes, size=batch)
    threshold = float(doc.get("threshold", 1e-4))
    err = E.model_gradcheck(model, x, y, eps=float(doc.get("eps", 1e-6)))
    return {"n_params": n_params, "max_rel_err": err, "threshold": threshold, "passed": bool(err < threshold)}


def load_json(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from None


def packaged_config(name: str) -> Path:
    """Path of a config shipped inside the package (``blobs``, ``log_uniform``, ...)."""
    return Path(os.path.dirname(__file__)) / "configs" / f"{name}.json"

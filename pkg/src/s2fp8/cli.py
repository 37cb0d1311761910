"""``s2fp8`` command line: formats, quantize, train, checkgrad.

Exit status: 0 success, 1 usage or configuration error, 2 I/O or parse error.
A diverged training run is a result and still exits 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import codec
from . import experiments as X
from . import formats as F
from . import tensor as T

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2

COLUMNS = [
    ("format", "Format"),
    ("bits", "Bits"),
    ("s/e/m", "s/e/m"),
    ("min_subnormal", "Min subnormal"),
    ("min_normal", "Min normal"),
    ("max_normal", "Max normal"),
    ("approx_max_normal", "(Approx.) max"),
    ("machine_epsilon", "Machine epsilon"),
    ("range", "Range"),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def formats_table() -> list[dict]:
    return [F.describe(f) for f in F.PRESETS]


def cmd_formats(args) -> int:
    rows = formats_table()
    if args.json:
        print(json.dumps(rows, indent=2))
        return EXIT_OK
    cells = [[h for _, h in COLUMNS]] + [[str(r[k]) for k, _ in COLUMNS] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(COLUMNS))]
    for line in cells:
        print("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
    return EXIT_OK


def quantize_report(x: np.ndarray, out: np.ndarray, stats) -> dict:
    nz = x != 0
    flushed = int(np.count_nonzero(nz & (out == 0)))
    if nz.any():
        rel = np.abs(out[nz].astype(np.float64) - x[nz]) / np.abs(x[nz].astype(np.float64))
        max_rel = float(rel.max())
    else:
        max_rel = 0.0
    return {
        "elements": int(x.size),
        "nonzero": int(nz.sum()),
        "mu": stats.mu,
        "m": stats.m,
        "alpha": stats.alpha,
        "beta": stats.beta,
        "flushed_to_zero": flushed,
        "flushed_percent": 100.0 * flushed / max(int(nz.sum()), 1),
        "max_rel_error": max_rel,
    }


def cmd_quantize(args) -> int:
    try:
        codec._check_target(args.target_max)
    except ValueError as exc:
        raise X.ConfigError(str(exc)) from None
    x = T.load_tensor(args.inp)
    F._require_finite(x)
    stats = codec.compute_statistics(x, args.target_max)
    if args.mode == "fp8":
        out = F.truncate_tensor(x, F.FP8)
        T.save_tensor(args.out, out)
    else:
        enc = codec.encode(x, args.target_max)
        out = codec.decode(enc)
        if args.container == "s2f8":
            codec.save(args.out, enc)
        else:
            T.save_tensor(args.out, out)
    report = quantize_report(x, out, stats)
    report["mode"] = args.mode
    for k, v in report.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = X.load_config(args.config)
    summary = X.run_experiment(cfg, args.out_dir)
    for run in summary["runs"]:
        acc = run["val_accuracy"]
        acc_s = "NaN" if acc is None else f"{acc:.2f}"
        delta = run["delta_vs_reference"]
        delta_s = "" if delta is None else f"  delta {delta:+.2f}"
        print(f"{run['id']:<12} {run['mode']:<7} {run['status']:<9} val_acc {acc_s}{delta_s}")
    return EXIT_OK


def cmd_checkgrad(args) -> int:
    doc = X.load_json(args.config)
    if not isinstance(doc, dict):
        raise X.ConfigError("checkgrad config must be a JSON object")
    rep = X.checkgrad(doc)
    verdict = "PASS" if rep["passed"] else "FAIL"
    print(f"{verdict} max_rel_err={rep['max_rel_err']:.3e} threshold={rep['threshold']:.0e} params={rep['n_params']}")
    return EXIT_OK if rep["passed"] else EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2fp8", description="FP8 / S2FP8 emulation, codec and training experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("formats", help="print the format property table")
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=cmd_formats)

    q = sub.add_parser("quantize", help="truncate an S2T1 tensor file to FP8 or S2FP8")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--mode", choices=["fp8", "s2fp8"], required=True)
    q.add_argument("--target-max", type=float, default=codec.DEFAULT_TARGET_MAX)
    q.add_argument("--out", required=True)
    q.add_argument("--container", choices=["s2t1", "s2f8"], default="s2t1",
                   help="s2fp8 output: decoded binary32 tensor (s2t1) or encoded codes + statistics (s2f8)")
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("train", help="run an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("checkgrad", help="finite-difference check of FP32 backprop")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_checkgrad)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except X.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        # file system failures, malformed tensors/IDX/JSON, non-finite inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

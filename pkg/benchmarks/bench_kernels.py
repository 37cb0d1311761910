"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Checks that both backends agree bit for bit on every input before timing.
"""

import argparse
import time

import numpy as np

from s2fp8._backend import available


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = available()
    if "cython" not in mods:
        print("compiled backend not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    cases = []
    for n in (10_000, 1_000_000):
        x = (rng.standard_normal(n) * np.exp2(rng.uniform(-20, 16, n))).astype(np.float32)
        cases.append((f"round_to_format FP8 n={n}", "round_to_format", (x, 5, 2)))
    for m, k, n in ((64, 64, 64), (256, 256, 64), (512, 784, 64)):
        a = rng.standard_normal((m, k)).astype(np.float32)
        b = rng.standard_normal((k, n)).astype(np.float32)
        cases.append((f"gemm {m}x{k}x{n}", "gemm", (a, b)))

    print(f"{'kernel':<32}" + "".join(f"{name:>12}" for name in mods) + f"{'speedup':>10}")
    for label, fn, fargs in cases:
        outs = [getattr(mod, fn)(*fargs) for mod in mods.values()]
        assert all(np.array_equal(o.view(np.uint32), outs[0].view(np.uint32)) for o in outs), label
        times = [best_of(lambda mod=mod: getattr(mod, fn)(*fargs), args.repeat) for mod in mods.values()]
        speed = f"{times[0] / times[-1]:9.1f}x" if len(times) > 1 else ""
        print(f"{label:<32}" + "".join(f"{t * 1e3:10.2f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()

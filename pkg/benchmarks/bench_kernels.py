"""Compare the compiled kernel backend against the pure-numpy fallback on
the convolution and pooling shapes the full-scale network actually runs.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--dtype f32|f64]
"""

import argparse
import time

import numpy as np

from facepipe._kernels import _numpy as fallback

try:
    from facepipe._kernels import _native as native
except ImportError:
    native = None

CASES = [
    # (label, input hxwxc, filters cout) taken from the big network's stack
    ("conv 100x100x1 -> 32", (100, 100, 1), 32),
    ("conv 50x50x64 -> 64", (50, 50, 64), 64),
    ("conv 25x25x128 -> 96", (25, 25, 128), 96),
    ("conv 13x13x192 -> 128", (13, 13, 192), 128),
    ("conv 7x7x256 -> 160", (7, 7, 256), 160),
]


def timeit(fn, repeat):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(mod, dtype, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, (h, w, c), cout in CASES:
        xp = np.ascontiguousarray(rng.standard_normal((h + 2, w + 2, c))
                                  .astype(dtype))
        wt = np.ascontiguousarray(rng.standard_normal((3, 3, c, cout))
                                  .astype(dtype))
        fwd = timeit(lambda: mod.conv2d_valid(xp, wt, 1), repeat)
        up = np.ascontiguousarray(rng.standard_normal((h, w, cout))
                                  .astype(dtype))
        bwd_in = timeit(lambda: mod.conv2d_valid_input_grad(
            up, wt, 1, h + 2, w + 2), repeat)
        bwd_w = timeit(lambda: mod.conv2d_valid_weight_grad(
            xp, up, 1, 3, 3), repeat)
        rows.append((label, fwd, bwd_in, bwd_w))
    x = np.ascontiguousarray(rng.standard_normal((100, 100, 64)).astype(dtype))
    pool = timeit(lambda: mod.maxpool_forward(x, 2, 2, 50, 50), repeat)
    rows.append(("maxpool 100x100x64", pool, float("nan"), float("nan")))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    args = parser.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64

    results = {"numpy": bench_backend(fallback, dtype, args.repeat)}
    if native is not None:
        results["native"] = bench_backend(native, dtype, args.repeat)
    else:
        print("compiled backend not built; showing the fallback only\n")

    header = f"{'case':24s} {'op':8s}" + "".join(
        f" {name:>10s}" for name in results)
    if len(results) == 2:
        header += f" {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    ops = ("forward", "grad_in", "grad_w")
    for i, (label, *_) in enumerate(results["numpy"]):
        for k, op in enumerate(ops):
            vals = [results[name][i][1 + k] for name in results]
            if any(np.isnan(v) for v in vals):
                continue
            line = f"{label:24s} {op:8s}" + "".join(
                f" {1e3 * v:9.2f}m" for v in vals)
            if len(vals) == 2:
                line += f" {vals[0] / vals[1]:7.1f}x"
            print(line)


if __name__ == "__main__":
    main()

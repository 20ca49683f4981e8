"""Time the numba and numpy kernel backends against each other.

    python benchmarks/bench_kernels.py [--repeats 5] [--out kernels.csv]

Each case runs once per backend to trigger JIT compilation, then reports the
best of ``--repeats`` timings and the max abs difference between backends.
"""

import argparse
import csv
import sys
import time

import numpy as np

from bem.ndtensor import kernels

CASES = [
    # name, input shape, weight shape, stride
    ("conv3x3 8ch 32px", (8, 8, 32, 32), (8, 8, 3, 3), 1),
    ("conv3x3 16ch 64px", (2, 16, 64, 64), (16, 16, 3, 3), 1),
    ("conv3x3 s2 16->32 64px", (2, 16, 64, 64), (32, 16, 3, 3), 2),
    ("conv3x3 6->16 256px", (1, 6, 256, 256), (16, 6, 3, 3), 1),
]
RESIZE = [
    ("resize 8->32", (8, 3, 8, 8), 32),
    ("resize 16->256", (1, 3, 16, 16), 256),
    ("resize 256->64", (1, 16, 256, 256), 64),
]


def best_of(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, xs, ws, stride in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        g = rng.standard_normal(kernels.conv2d_forward(x, w, stride, 1).shape).astype(np.float32)
        ops = {
            "fwd": lambda: kernels.conv2d_forward(x, w, stride, 1),
            "grad_in": lambda: kernels.conv2d_grad_input(g, w, x.shape, stride, 1),
            "grad_w": lambda: kernels.conv2d_grad_weight(g, x, w.shape, stride, 1),
        }
        for op, fn in ops.items():
            rows.append(compare(f"{name} {op}", fn, repeats))
    for name, xs, size in RESIZE:
        x = rng.standard_normal(xs).astype(np.float32)
        rows.append(compare(name, lambda: kernels.resize_forward(x, size, size), repeats))
    return rows


def compare(name, fn, repeats):
    res = {}
    for b in ("numpy", "numba"):
        prev = kernels.set_backend(b)
        try:
            res[b] = best_of(fn, repeats)
        finally:
            kernels.set_backend(prev)
    diff = float(np.max(np.abs(res["numpy"][1] - res["numba"][1])))
    t_np, t_nb = res["numpy"][0], res["numba"][0]
    return [name, f"{t_np * 1e3:.3f}", f"{t_nb * 1e3:.3f}", f"{t_np / t_nb:.2f}", f"{diff:.2e}"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    args = p.parse_args(argv)
    if not kernels.NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    header = ["case", "numpy_ms", "numba_ms", "speedup", "max_abs_diff"]
    rows = run(args.repeats)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if args.out:
        out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())

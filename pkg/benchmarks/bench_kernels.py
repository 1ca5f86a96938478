"""Numba vs numpy kernel timings, plus an end-to-end PQ fit per backend.

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 5]

Kernel timings run both implementations in this process (best of
``--repeat``, after one warm-up call so JIT compilation is excluded). The
PQ fit runs in a fresh interpreter per backend, selected by SIESTA_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from siesta import kernels

FIT_SCRIPT = (
    "import time, numpy as np\n"
    "from siesta import pq, kernels\n"
    "x = np.random.default_rng(0).standard_normal(({n}, 32))\n"
    "pq.fit(x[:300], 8, 16, seed=0, iterations=2, restarts=1)\n"   # warm-up / JIT
    "t = time.perf_counter()\n"
    "pq.fit(x, 8, 256, seed=0, iterations=10, restarts=1)\n"
    "print(kernels.BACKEND, time.perf_counter() - t)\n"
)


def best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(n, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, 4))
    cents = rng.standard_normal((256, 4))
    books = rng.standard_normal((8, 256, 4))
    xx = rng.standard_normal((n, 32))
    codes = kernels.pq_encode_numpy(xx, books)
    labels = rng.integers(0, 256, n)
    d2 = np.full(n, np.inf)
    cases = {
        "nearest_centroid": lambda b: getattr(kernels, f"nearest_centroid_{b}")(x, cents),
        "pq_encode": lambda b: getattr(kernels, f"pq_encode_{b}")(xx, books),
        "pq_decode": lambda b: getattr(kernels, f"pq_decode_{b}")(codes, books),
        "min_sq_dist_update": lambda b: getattr(kernels, f"min_sq_dist_update_{b}")(x, cents[0], d2),
        "lloyd_update": lambda b: getattr(kernels, f"lloyd_update_{b}")(x, labels, 256),
    }
    rows = []
    for name, call in cases.items():
        t_np = best(lambda: call("numpy"), repeat)
        t_nb = best(lambda: call("numba"), repeat) if kernels.HAVE_NUMBA else float("nan")
        rows.append((name, t_np, t_nb))
    return rows


def fit_times(n):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, SIESTA_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", FIT_SCRIPT.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"kernels, n={args.n} (seconds, best of {args.repeat})")
    print(f"{'kernel':<20}{'numpy':>10}{'numba':>10}{'speedup':>9}")
    for name, t_np, t_nb in kernel_table(args.n, args.repeat):
        print(f"{name:<20}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>8.1f}x")
    ft = fit_times(args.n)
    print(f"\npq.fit 8 x 256 codebooks, {args.n} x 32 vectors, 10 Lloyd iterations")
    for backend, secs in sorted(ft.items()):
        print(f"  {backend:<6}{secs:8.2f}s")


if __name__ == "__main__":
    main()

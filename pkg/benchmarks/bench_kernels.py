"""Compare the compiled kernels against the numpy/pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--quick]
"""
import argparse
import sys
import timeit

import numpy as np

from tokenlab import kernels


def cases(quick: bool):
    rng = np.random.default_rng(0)
    n_bytes = 1 << (16 if quick else 22)
    blob = rng.integers(0, 256, n_bytes, dtype=np.uint8).tobytes()
    n_rows = 20_000 if quick else 200_000
    idx = rng.integers(0, 1200, n_rows)
    rows = rng.standard_normal((n_rows, 32)).astype(np.float32)
    table = np.zeros((1200, 32), np.float32)
    r2 = (2 * np.arange(1, 26)).astype(np.int64)      # n = 25 doubled ranks, the exact-test limit
    return [
        (f"fnv1a64 ({n_bytes >> 10} KiB)", lambda impl: impl.fnv1a64(blob)),
        (f"scatter_add_rows ({n_rows} x 32 f32)", lambda impl: impl.scatter_add_rows(table, idx, rows)),
        ("signed_rank_counts (n=25)", lambda impl: impl.signed_rank_counts(r2)),
    ]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5, help="timing repetitions; the best is reported")
    p.add_argument("--quick", action="store_true", help="smaller inputs")
    args = p.parse_args(argv)
    if kernels.compiled_impl is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1
    print(f"{'kernel':40s} {'compiled ms':>12s} {'python ms':>12s} {'speedup':>8s}")
    for name, fn in cases(args.quick):
        best = {}
        for label, impl in (("compiled", kernels.compiled_impl), ("python", kernels.python_impl)):
            number = 1
            best[label] = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
        print(f"{name:40s} {1e3 * best['compiled']:12.3f} {1e3 * best['python']:12.3f} "
              f"{best['python'] / best['compiled']:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

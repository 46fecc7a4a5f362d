"""Compare the compiled Jacobi SVD kernel with the pure-Python fallback.

Usage: python benchmarks/bench_svd.py [--sizes 16 32 64 128] [--repeats 5]
"""

import argparse
import importlib
import os
import time

import numpy as np


def _load(pure: bool):
    if pure:
        os.environ["CONTILORA_PURE_PYTHON"] = "1"
    else:
        os.environ.pop("CONTILORA_PURE_PYTHON", None)
    import contilora.matcore as matcore

    return importlib.reload(matcore)


def _time(fn, m, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(m)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 128])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    mats = {n: rng.standard_normal((n, n)) for n in args.sizes}

    compiled = _load(pure=False)
    if compiled.BACKEND != "compiled":
        print("compiled kernel not built; run `pip install -e . --no-build-isolation` first")
    fast = {n: _time(compiled.svd, m, args.repeats) for n, m in mats.items()}
    python = _load(pure=True)
    slow = {n: _time(python.svd, m, args.repeats) for n, m in mats.items()}
    _load(pure=False)

    print(f"{'n':>5} {'compiled s':>12} {'python s':>12} {'speedup':>8}")
    for n in args.sizes:
        print(f"{n:>5} {fast[n]:>12.5f} {slow[n]:>12.5f} {slow[n] / fast[n]:>8.1f}")


if __name__ == "__main__":
    main()

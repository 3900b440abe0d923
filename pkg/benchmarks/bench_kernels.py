"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported in one process; the env flag only picks the
default alias, the explicit ``*_numba`` / ``*_numpy`` functions are always
available when numba is installed.
"""
import argparse
import timeit

import numpy as np

from loralign import kernels


def jacobi_case(m, n, seed=0):
    a = np.random.default_rng(seed).normal(size=(m, n))
    _, r = np.linalg.qr(a)
    p = r.shape[1]
    sched = kernels.round_robin_schedule(p)
    tol = np.finfo(float).eps * p

    def run(fn):
        g, v = r.copy(), np.eye(p)
        fn(g, v, sched, tol, 100)

    return run


def matmul_case(m, k, n, seed=0):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    return lambda fn: fn(a, b)


def box_case(h, w, c, win, seed=0):
    x = np.ascontiguousarray(np.random.default_rng(seed).random((h, w, c)))
    return lambda fn: fn(x, win)


CASES = [
    ("jacobi 96x32", jacobi_case(96, 32), "jacobi_sweeps"),
    ("jacobi 64x64", jacobi_case(64, 64), "jacobi_sweeps"),
    ("ordered matmul 64x64x64", matmul_case(64, 64, 64), "ordered_matmul"),
    ("box mean 32x32x15 w=8", box_case(32, 32, 15, 8), "box_mean"),
]


def best_of(fn, repeat):
    fn()  # warm-up, also triggers compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'case':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, case, name in CASES:
        fast = best_of(lambda: case(getattr(kernels, f"{name}_numba")), args.repeat)
        slow = best_of(lambda: case(getattr(kernels, f"{name}_numpy")), args.repeat)
        print(f"{label:28s} {fast * 1e3:10.3f} {slow * 1e3:10.3f} {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()

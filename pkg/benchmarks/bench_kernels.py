"""Time the hot kernels on the numpy and numba backends.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--seed S]

Prints one table row per (kernel, problem size): best-of-N wall time for
each backend and the resulting speedup. The numba path is warmed once per
shape before timing so compilation is not billed to the measurement. Exits
nonzero if the backends disagree numerically, since a fast wrong kernel is
worse than no kernel.
"""

import argparse
import sys
import time

import numpy as np

from autorig import kernels


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    for n, m in ((2048, 256), (8192, 1024)):
        a = rng.standard_normal((n, 3))
        b = rng.standard_normal((m, 3))
        yield (f"nearest_sqdist     n={n:<5} m={m:<4}",
               lambda a=a, b=b: kernels.nearest_sqdist(a, b))
    for n, m in ((2048, 16), (8192, 64)):
        p = rng.standard_normal((n, 3))
        sa = rng.standard_normal((m, 3))
        sb = sa + 0.3 * rng.standard_normal((m, 3))
        yield (f"point_segment_dist n={n:<5} m={m:<4}",
               lambda p=p, sa=sa, sb=sb: kernels.point_segment_dist(p, sa, sb))
    for n, k in ((2048, 16), (8192, 64)):
        p = rng.standard_normal((n, 3))
        w = rng.uniform(0.0, 1.0, (n, k))
        w /= w.sum(axis=1, keepdims=True)
        rot = np.tile(np.eye(3), (k, 1, 1)) + 0.1 * rng.standard_normal((k, 3, 3))
        trans = rng.standard_normal((k, 3))
        yield (f"lbs_blend          n={n:<5} k={k:<4}",
               lambda p=p, w=w, rot=rot, trans=trans:
               kernels.lbs_blend(p, w, rot, trans))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed runs per case; best is reported (default 5)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    try:
        kernels.set_backend("numba")
    except ImportError:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    original = kernels.active_backend()

    rng = np.random.default_rng(args.seed)
    rows = []
    mismatch = False
    try:
        for label, fn in _cases(rng):
            kernels.set_backend("numba")
            fn()  # compile + warm
            t_numba = _best_of(fn, args.repeats)
            got_numba = fn()
            kernels.set_backend("numpy")
            t_numpy = _best_of(fn, args.repeats)
            got_numpy = fn()
            gap = float(np.max(np.abs(got_numba - got_numpy)))
            if gap > 1e-9:
                print(f"backend mismatch in {label}: max gap {gap:.3e}",
                      file=sys.stderr)
                mismatch = True
            rows.append((label, t_numpy, t_numba))
    finally:
        kernels.set_backend(original)

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel / size'.ljust(width)}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for label, t_np, t_nb in rows:
        print(f"{label.ljust(width)}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms"
              f"  {t_np / t_nb:>7.1f}x")
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())

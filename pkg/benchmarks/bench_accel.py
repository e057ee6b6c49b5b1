"""Compare the numba kernels with the pure-numpy fallback.

    python benchmarks/bench_accel.py [--points 50000] [--queries 5000] [--repeat 3]

Both backends run in one process (the switch is read at call time). Timings
exclude the first numba call, which pays for compilation or cache loading.
Results must match bit for bit; the script exits non-zero if they do not.
"""

import argparse
import sys
import time

import numpy as np

from splatdiff import _accel
from splatdiff.depth import correlation_stats
from splatdiff.spatial import KdIndex


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def knn_case(pts, queries, k):
    def run():
        return KdIndex(pts).query(queries, k)

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=50_000)
    ap.add_argument("--queries", type=int, default=5_000)
    ap.add_argument("--pixels", type=int, default=4_000_000)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    pts = rng.uniform(-50, 50, (a.points, 3))
    queries = rng.uniform(-55, 55, (a.queries, 3))
    x = rng.uniform(1, 80, a.pixels)
    y = 0.5 * x + rng.normal(0, 3, a.pixels)

    cases = {
        f"kNN build+query N={a.points} Q={a.queries} k={a.k}": knn_case(pts, queries, a.k),
        f"Pearson block stats n={a.pixels}": lambda: correlation_stats(x, y),
    }
    mismatch = False
    print(f"{'case':<48} {'numba s':>9} {'numpy s':>9} {'speedup':>8}")
    for name, fn in cases.items():
        _accel.set_backend("numba")
        fn()  # warm-up: compile or load cache
        t_nb, r_nb = best_of(fn, a.repeat)
        _accel.set_backend("numpy")
        t_np, r_np = best_of(fn, a.repeat)
        same = all(np.array_equal(u, v) for u, v in zip(r_nb, r_np)) if "kNN" in name else np.allclose(r_nb, r_np, rtol=1e-14, atol=0)
        mismatch |= not same
        print(f"{name:<48} {t_nb:9.3f} {t_np:9.3f} {t_np / t_nb:7.1f}x{'' if same else '  MISMATCH'}")
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())

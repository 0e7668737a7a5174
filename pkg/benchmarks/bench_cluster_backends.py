"""Benchmark the compiled agglomeration kernels against the numpy fallback.

Runs the full linkage path (pairwise squared distances + nearest-neighbor
chain) on profile-shaped inputs of growing size and prints one row per
(backend, n).  Usage:

    python benchmarks/bench_cluster_backends.py [--sizes 200,500,1000,2000]
"""

import argparse
import time

import numpy as np

from trajgp import _cluster_core_np as np_core
from trajgp.clustering import _relabel

try:
    from trajgp import _cluster_core as c_core
except ImportError:
    c_core = None


def profile_like(n, dim=128, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, dim)) * 4.0
    labels = rng.choice(3, size=n, p=[0.9, 0.08, 0.02])
    return centers[labels] + rng.normal(size=(n, dim))


def run_linkage(core, x, method):
    t0 = time.perf_counter()
    dist = core.pairwise_sq_matrix(x)
    t_dist = time.perf_counter() - t0
    if method == core.METHOD_AVERAGE:
        dist = np.sqrt(dist)
    t0 = time.perf_counter()
    merges = core.nn_chain(np.ascontiguousarray(dist), method)
    t_chain = time.perf_counter() - t0
    linkage = _relabel(merges, x.shape[0])
    return t_dist, t_chain, linkage


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="200,500,1000,2000")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    backends = [("python", np_core)]
    if c_core is not None:
        backends.insert(0, ("compiled", c_core))
    else:
        print("compiled backend unavailable; benchmarking fallback only")

    header = f"{'backend':9s} {'n':>6s} {'pairwise (ms)':>14s} " \
             f"{'nn-chain (ms)':>14s} {'total (ms)':>11s}"
    print(header)
    print("-" * len(header))
    totals = {}
    for n in sizes:
        x = profile_like(n)
        for name, core in backends:
            best = (np.inf, np.inf)
            linkage = None
            for _ in range(args.repeats):
                t_dist, t_chain, linkage = run_linkage(core, x,
                                                       core.METHOD_WARD)
                if t_dist + t_chain < sum(best):
                    best = (t_dist, t_chain)
            totals[(name, n)] = sum(best)
            print(f"{name:9s} {n:6d} {best[0] * 1e3:14.2f} "
                  f"{best[1] * 1e3:14.2f} {sum(best) * 1e3:11.2f}")
        if c_core is not None:
            speedup = totals[('python', n)] / totals[('compiled', n)]
            print(f"{'':9s} {n:6d} {'':14s} {'':14s} {speedup:10.1f}x")

    if c_core is not None:
        # The two backends must produce the same dendrogram.
        x = profile_like(sizes[0])
        _, _, link_c = run_linkage(c_core, x, c_core.METHOD_WARD)
        _, _, link_p = run_linkage(np_core, x, np_core.METHOD_WARD)
        same = (np.array_equal(link_c[:, :2], link_p[:, :2])
                and np.allclose(link_c[:, 2], link_p[:, 2], atol=1e-9))
        print(f"\nbackends agree on n={sizes[0]}: {same}")


if __name__ == "__main__":
    main()

"""Time the numba kernels against the numpy fallback on one synthetic workload.

    python3 benchmarks/bench_kernels.py --users 50000 --reps 3

Both paths run in the same process by flipping the module-level switch the
dispatchers read, and each kernel's outputs are compared before timing is
reported. The first numba call per kernel pays compilation and is excluded.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from tqtree import _kernels as K
from tqtree import ServiceMode, ServiceParams, TQTree
from tqtree.baseline import PointIndex
from tqtree.ingest import SyntheticSpec, generate_synthetic
from tqtree.kmaxrrst import top_k_facilities
from tqtree.tree import bounds_for


def timeit(fn, reps):
    fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return out, statistics.median(ts)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=50_000)
    ap.add_argument("--facilities", type=int, default=64)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    users, facs = generate_synthetic(SyntheticSpec(users=a.users, facilities=a.facilities, seed=a.seed))
    params = ServiceParams(200.0, ServiceMode.BINARY)
    bounds = bounds_for(users, params.psi)
    pts = np.concatenate([u.points for u in users])
    codes = np.sort(K.morton_codes(pts[:, 0], pts[:, 1], bounds.as_tuple()))
    idx = PointIndex(users, bounds=bounds)
    stops = facs[0].stops

    cases = {
        "served_mask": lambda: K.served_mask(pts[:, 0], pts[:, 1], stops[:, 0], stops[:, 1], 200.0 ** 2),
        "partition": lambda: K.partition(codes, 0, 64),
        "range_query": lambda: np.concatenate([idx.query_positions(x, y, 200.0) for x, y in stops]),
        "build": lambda: TQTree.build(users, beta=64, bounds=bounds).n_entries,
    }
    tree = TQTree.build(users, beta=64, bounds=bounds)
    tree.flat()
    for z in (False, True):
        cases[f"top_k use_z={z}"] = (lambda z: lambda: [
            (r.id, r.units) for r in top_k_facilities(facs, a.k, params, tree, use_z=z)])(z)

    print(f"{'kernel':<20}{'numba_s':>12}{'numpy_s':>12}{'ratio':>10}  match")
    saved = K.USE_NUMBA
    try:
        for name, fn in cases.items():
            K.USE_NUMBA = True
            r_nb, t_nb = timeit(fn, a.reps)
            K.USE_NUMBA = False
            r_np, t_np = timeit(fn, a.reps)
            print(f"{name:<20}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}  {same(r_nb, r_np)}")
    finally:
        K.USE_NUMBA = saved


if __name__ == "__main__":
    main()

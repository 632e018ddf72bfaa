"""Acceptance gates, one test per criterion.

Run with ``pytest -v tests/test_acceptance.py``; each test name states the
criterion it gates and prints a one-line summary of what it measured.
"""
from __future__ import annotations

import functools
import statistics
import time

import numpy as np
import pytest

from conftest import FIG_BOUNDS, figure_facilities, figure_users, random_instance
from tqtree import (FacilityTrajectory, ServiceMode, ServiceParams, TQTree, UserTrajectory, Variant,
                    service_group)
from tqtree.baseline import PointIndex, baseline_topk, linear_scan_topk
from tqtree.ingest import SyntheticSpec, generate_synthetic
from tqtree.kmaxrrst import Query, top_k_facilities, z_reduce_ids
from tqtree.maxkcov import TreeProvider, exact_maxkcov, greedy_maxkcov, two_step_greedy
from tqtree.tree import bounds_for

MODES = list(ServiceMode)
VARIANTS = list(Variant)
SEEDS_PER_CELL = 12  # 9 mode/variant cells x 12 = 108 instances


@functools.lru_cache(maxsize=None)
def suite():
    """Seeded instances spanning every mode and tree variant, with built trees."""
    out = []
    for mi, mode in enumerate(MODES):
        for vi, variant in enumerate(VARIANTS):
            for s in range(SEEDS_PER_CELL):
                seed = 1000 * mi + 100 * vi + s
                two_only = variant is Variant.TWO_POINT and mode is not ServiceMode.BINARY
                users, facs, psi = random_instance(seed, points=(2, 2) if two_only else None)
                params = ServiceParams(psi, mode)
                beta = int(np.random.default_rng(seed).choice([2, 4, 16, 64]))
                tree = TQTree.build(users, beta=beta, variant=variant, mode=mode,
                                    bounds=bounds_for(users, psi))
                out.append((seed, users, facs, params, tree))
    return out


def ranking(res):
    return [(r.id, r.units, r.users_served) for r in res]


def test_criterion_1_worked_example():
    t0 = time.perf_counter()
    users, facs = figure_users(), figure_facilities()
    p = ServiceParams(0.6, ServiceMode.BINARY)
    tree = TQTree.build(users, beta=2, bounds=FIG_BOUNDS, mode=p.mode)
    top = top_k_facilities(facs, 1, p, tree)
    assert [(r.id, r.score) for r in top] == [(46, 4.0)]
    full = {r.id: r.score for r in top_k_facilities(facs, 3, p, tree)}
    assert full == {25: 3.0, 46: 4.0, 65: 2.0}
    sol = greedy_maxkcov(facs, 2, p, provider=TreeProvider(tree))
    assert sorted(sol.chosen) == [46, 65] and sol.value == 8.0
    ex = exact_maxkcov(facs, 2, p, users=users)
    assert sorted(ex.chosen) == [46, 65] and ex.value == 8.0
    entries = [("u5", "0.0", "1.0"), ("u6", "0.0", "1.2"), ("u7", "0.3", "2"), ("u8", "2", "1.3")]
    assert z_reduce_ids(entries, ["0.0", "0.1", "1.2", "1.3", "2", "3"]) == ["u6", "u8"]
    dt = time.perf_counter() - t0
    print(f"criterion 1: top1=46 (4), 25->3, 65->2, cover(2)={{46,65}} (8), zReduce={{u6,u8}}, {dt:.3f}s")
    assert dt < 1.0


def test_criterion_2_oracle_equivalence():
    checked = 0
    for seed, users, facs, p, tree in suite():
        k = len(facs)
        ref = ranking(linear_scan_topk(users, facs, k, p))
        idx = PointIndex(tree.table, bounds=tree.bounds)
        assert ranking(baseline_topk(facs, k, p, idx)) == ref, seed
        for use_z in (True, False):
            assert ranking(top_k_facilities(facs, k, p, tree, use_z=use_z)) == ref, (seed, use_z)
        kk = max(1, k // 3)
        assert ranking(top_k_facilities(facs, kk, p, tree)) == ref[:kk], seed
        checked += 1
    print(f"criterion 2: {checked} instances, 0 mismatches across TQ(Z), TQ(B), BL and linear scan")
    assert checked >= 100


def test_criterion_3_bound_soundness():
    steps = 0
    bad = []
    for seed, users, facs, p, tree in suite():
        exact = {r.id: r.units for r in linear_scan_topk(users, facs, len(facs), p)}
        q = Query(tree, facs, p)
        for i, f in enumerate(q.facilities):
            s = q.initial_state(i)
            if s.fserve < exact[f.id]:
                bad.append((seed, f.id, "initial", s.fserve, exact[f.id]))
            while not s.done:
                r = q.relax(s)
                steps += 1
                if r.fserve > s.fserve or r.fserve < exact[f.id]:
                    bad.append((seed, f.id, s.fserve, r.fserve, exact[f.id]))
                s = r
            if s.aserve != exact[f.id]:
                bad.append((seed, f.id, "final", s.aserve, exact[f.id]))

        def rec(t, seed=seed, exact=exact):
            steps_box.append(1)
            if t.after > t.before or t.after < exact[t.fid]:
                bad.append((seed, t.fid, t.before, t.after))
        steps_box = []
        top_k_facilities(facs, max(1, len(facs) // 2), p, tree, trace=rec)
        steps += len(steps_box)
    print(f"criterion 3: {steps} relaxation steps, {len(bad)} violations")
    assert not bad, bad[:5]


def test_criterion_4_non_submodular_construction():
    # u: source near b only, destination near x only; v is served by a alone.
    users = [UserTrajectory("u", [(0, 0), (100, 0)]), UserTrajectory("v", [(0, 50), (10, 50)])]
    a = FacilityTrajectory("a", [(0, 50), (10, 50)])
    b = FacilityTrajectory("b", [(0, 1)])
    x = FacilityTrajectory("x", [(100, 1)])
    p = ServiceParams(2.0, ServiceMode.BINARY)
    A, B = [a], [a, b]
    so = functools.partial(service_group, users, params=p)
    assert so(A + [x]) == so(A) == 1.0
    assert so(B + [x]) == so(B) + 1 == 2.0
    print(f"criterion 4: SO(A+x)={so(A + [x])}=SO(A), SO(B+x)={so(B + [x])}=SO(B)+1")


def test_criterion_5_greedy_quality():
    ratios, ratios_two = [], []
    for seed in range(60):
        rng = np.random.default_rng(50_000 + seed)
        mode = MODES[seed % 3]
        users, facs, psi = random_instance(50_000 + seed, n_fac=int(rng.integers(5, 21)),
                                           points=(2, 2) if mode is ServiceMode.BINARY else None)
        k = int(rng.integers(2, 5))
        p = ServiceParams(psi, mode)
        tree = TQTree.build(users, beta=16, mode=mode, variant=Variant.FULL, bounds=bounds_for(users, psi))
        prov = TreeProvider(tree)
        ex = exact_maxkcov(facs, k, p, provider=prov)
        g = greedy_maxkcov(facs, k, p, provider=prov)
        g2 = two_step_greedy(facs, k, p, provider=prov)
        assert g.units <= ex.units and g2.units <= ex.units
        ratios.append(g.units / ex.units if ex.units else 1.0)
        ratios_two.append(g2.units / ex.units if ex.units else 1.0)
    mean, mean2 = statistics.fmean(ratios), statistics.fmean(ratios_two)
    print(f"criterion 5: {len(ratios)} instances, greedy/exact mean={mean:.4f} min={min(ratios):.4f}; "
          f"two-step mean={mean2:.4f} min={min(ratios_two):.4f}")
    assert mean >= 0.9 and mean2 >= 0.9


def _median_latency(fn, reps=5):
    fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


@pytest.mark.slow
def test_criterion_6_scaled_speedup():
    users, facs = generate_synthetic(SyntheticSpec(users=100_000, facilities=64, stops=32, seed=7))
    p = ServiceParams(200.0, ServiceMode.BINARY)
    tree = TQTree.build(users, beta=64, bounds=bounds_for(users, p.psi), mode=p.mode)
    idx = PointIndex(tree.table, bounds=tree.bounds)
    runs = {
        "BL": lambda: baseline_topk(facs, 8, p, idx),
        "TQ(B)": lambda: top_k_facilities(facs, 8, p, tree, use_z=False),
        "TQ(Z)": lambda: top_k_facilities(facs, 8, p, tree, use_z=True),
    }
    results = {m: ranking(fn()) for m, fn in runs.items()}
    assert results["BL"] == results["TQ(B)"] == results["TQ(Z)"]
    lat = {m: _median_latency(fn) for m, fn in runs.items()}
    vs_bl, vs_b = lat["BL"] / lat["TQ(Z)"], lat["TQ(B)"] / lat["TQ(Z)"]
    print(f"criterion 6: median BL={lat['BL']:.4f}s TQ(B)={lat['TQ(B)']:.4f}s TQ(Z)={lat['TQ(Z)']:.4f}s; "
          f"TQ(Z) speedup {vs_bl:.1f}x vs BL, {vs_b:.1f}x vs TQ(B)")
    assert max(lat.values()) < 60.0
    assert vs_bl >= 10.0 and vs_b >= 2.0


def test_criterion_7_structural_invariants():
    violations = []
    for seed, users, facs, p, tree in suite():
        violations += [(seed, v) for v in tree.check_invariants()]
        expect = len(users) if tree.variant is not Variant.SEGMENTED else sum(len(u) - 1 for u in users)
        if sum(len(n) for n in tree.nodes()) != expect:
            violations.append((seed, "storage count"))
    sequences = 0
    for seed in range(100):
        rng = np.random.default_rng(70_000 + seed)
        mode = MODES[seed % 3]
        variant = VARIANTS[(seed // 3) % 3]
        two_only = variant is Variant.TWO_POINT and mode is not ServiceMode.BINARY
        users, facs, psi = random_instance(70_000 + seed, n_users=int(rng.integers(2, 150)),
                                           points=(2, 2) if two_only else None)
        p = ServiceParams(psi, mode)
        bounds = bounds_for(users, psi)
        beta = int(rng.choice([2, 4, 8]))
        order = rng.permutation(len(users))
        split = int(rng.integers(0, len(users)))
        inc = TQTree.build([users[i] for i in order[:split]], beta=beta, variant=variant, mode=mode,
                           bounds=bounds)
        for i in order[split:]:
            inc.insert(users[i])
        full = TQTree.build(users, beta=beta, variant=variant, mode=mode, bounds=bounds)
        violations += [(seed, "insert", v) for v in inc.check_invariants()]
        a = ranking(top_k_facilities(facs, len(facs), p, inc))
        b = ranking(top_k_facilities(facs, len(facs), p, full))
        # rows differ between the two trees, so compare by user id
        ca = {f: {inc.table.ids[r]: s for r, s in c.items()} for f, c in TreeProvider(inc).coverage(facs, p).items()}
        cb = {f: {full.table.ids[r]: s for r, s in c.items()} for f, c in TreeProvider(full).coverage(facs, p).items()}
        if a != b or ca != cb:
            violations.append((seed, "insert-vs-rebuild"))
        sequences += 1
    print(f"criterion 7: {len(suite())} built trees + {sequences} insert sequences, {len(violations)} violations")
    assert not violations, violations[:5]


@pytest.mark.slow
def test_criterion_8_build_time():
    users, _ = generate_synthetic(SyntheticSpec(users=350_000, facilities=1, stops=1, seed=8))
    t0 = time.perf_counter()
    tree = TQTree.build(users, beta=64, bounds=bounds_for(users, 200.0))
    dt = time.perf_counter() - t0
    print(f"criterion 8: built {tree.n_entries} entries over {len(users)} trajectories in {dt:.2f}s")
    assert tree.n_entries == 350_000
    assert dt < 30.0


def test_criterion_9_snapshot_round_trip():
    n = 0
    for seed, users, facs, p, tree in suite():
        first = tree.dumps()
        loaded = TQTree.loads(first)
        assert loaded.dumps() == first, seed
        n += 1
    print(f"criterion 9: {n} snapshots, save->load->save byte-identical")

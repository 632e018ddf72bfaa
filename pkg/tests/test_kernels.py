"""Kernel correctness, plus parity between the compiled and pure-numpy paths."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from tqtree import _kernels as K
from tqtree import ServiceMode, ServiceParams, TQTree, Variant
from tqtree.baseline import PointIndex, baseline_topk
from tqtree.kmaxrrst import top_k_facilities
from tqtree.tree import bounds_for

needs_numba = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba not importable")


def both_paths(fn):
    """Run ``fn`` under the compiled and the pure-numpy backend; return both results."""
    saved = K.USE_NUMBA
    try:
        K.USE_NUMBA = True
        a = fn()
        K.USE_NUMBA = False
        b = fn()
    finally:
        K.USE_NUMBA = saved
    return a, b


def interleave_slow(gx: int, gy: int) -> int:
    out = 0
    for b in range(32):
        out |= ((gx >> b) & 1) << (2 * b)
        out |= ((gy >> b) & 1) << (2 * b + 1)
    return out


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_morton_interleaves_bits(gx, gy):
    bounds = (0.0, 0.0, float(2**32), float(2**32))
    code = int(K.morton_codes(np.array([gx + 0.5]), np.array([gy + 0.5]), bounds)[0])
    assert code == interleave_slow(gx, gy)
    ix, iy = K.deinterleave(np.array([code], np.uint64))
    assert (int(ix[0]), int(iy[0])) == (gx, gy)


def test_first_digit_names_the_quadrant():
    xs = np.array([1.0, 3.0, 1.0, 3.0])
    ys = np.array([1.0, 1.0, 3.0, 3.0])
    codes = K.morton_codes(xs, ys, (0.0, 0.0, 4.0, 4.0))
    assert K.digit_at(codes, 0).tolist() == [0, 1, 2, 3]


def test_upper_edge_maps_to_last_cell():
    codes = K.morton_codes(np.array([4.0]), np.array([4.0]), (0.0, 0.0, 4.0, 4.0))
    assert int(codes[0]) == 2**64 - 1


@given(st.lists(st.integers(0, 2**64 - 1), max_size=80))
def test_bit_length_matches_python(vals):
    got = K.bit_length_u64(np.array(vals, np.uint64)).tolist()
    assert got == [v.bit_length() for v in vals]


codes_st = st.lists(st.integers(0, 2**64 - 1) | st.sampled_from([0, 2**63, 2**64 - 1]), max_size=120)


def _check_partition(codes, beta, labels, out, maxdepth=K.MAX_DIGITS):
    depth, prefix, lo, hi, skip, leaf, leaf_of = out
    n = codes.shape[0]
    assert leaf_of.shape[0] == n
    covered = np.zeros(n, int)
    for p in np.flatnonzero(leaf):
        covered[lo[p]:hi[p]] += 1
        if depth[p] < maxdepth:
            assert hi[p] - lo[p] <= beta
            if labels is not None:
                lab = labels[lo[p]:hi[p]]
                assert np.unique(lab).shape[0] == lab.shape[0]
    assert (covered == 1).all()
    for i in range(n):
        p = leaf_of[i]
        assert leaf[p] and lo[p] <= i < hi[p]
        d = int(depth[p])
        if d:
            assert int(codes[i]) >> (64 - 2 * d) == int(prefix[p])
    # skip jumps past the whole subtree
    for p in range(depth.shape[0]):
        s = skip[p]
        assert s == depth.shape[0] or depth[s] <= depth[p]
        assert all(depth[q] > depth[p] for q in range(p + 1, s))


@settings(max_examples=150)
@given(codes_st, st.integers(1, 8), st.booleans())
def test_partition_properties_on_both_paths(vals, beta, with_labels):
    codes = np.sort(np.array(vals, np.uint64))
    labels = np.arange(codes.shape[0]) % 3 if with_labels else None
    a, b = both_paths(lambda: K.partition(codes, 0, beta, labels))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    _check_partition(codes, beta, labels, a)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=50),
       st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), max_size=6), st.floats(0.1, 3))
def test_served_mask_paths_agree_with_brute_force(p, s, psi):
    p = np.array(p)
    s = np.array(s).reshape(-1, 2)
    a, b = both_paths(lambda: K.served_mask(p[:, 0], p[:, 1], s[:, 0], s[:, 1], psi * psi))
    d2 = ((p[:, None, :] - s[None, :, :]) ** 2).sum(-1) if s.size else np.zeros((len(p), 0))
    expect = (d2 <= psi * psi).any(axis=1) if s.size else np.zeros(len(p), bool)
    assert np.array_equal(a, expect) and np.array_equal(b, expect)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(0, 64), st.floats(0, 64)), min_size=1, max_size=200),
       st.tuples(st.floats(-5, 70), st.floats(-5, 70)), st.floats(0.5, 20), st.integers(1, 8))
def test_range_query_matches_brute_force(pts, center, psi, beta):
    from tqtree import UserTrajectory
    from tqtree.core import Rect
    pts = np.array(pts)
    if len(pts) % 2:
        pts = np.vstack([pts, pts[:1]])
    users = [UserTrajectory(i, pts[2 * i:2 * i + 2]) for i in range(len(pts) // 2)]
    idx = PointIndex(users, beta=beta, bounds=Rect(0, 0, 64, 64))
    a, b = both_paths(lambda: np.sort(idx.query_positions(center[0], center[1], psi)))
    assert np.array_equal(a, b)
    d2 = (idx.px - center[0]) ** 2 + (idx.py - center[1]) ** 2
    assert np.array_equal(a, np.flatnonzero(d2 <= psi * psi))


def test_cover_paths_agree():
    rng = np.random.default_rng(3)
    codes = np.sort(K.morton_codes(rng.uniform(0, 100, 500), rng.uniform(0, 100, 500), (0, 0, 100, 100)))
    depth, prefix, lo, hi, skip, leaf, _ = K.partition(codes, 0, 4)
    for _ in range(20):
        sx, sy = rng.uniform(0, 100, 3), rng.uniform(0, 100, 3)
        a, b = both_paths(lambda: K.cover(depth, prefix, skip, (0, 0, 100, 100), sx, sy, 25.0))
        # the compiled path skips the subtrees of uncovered cells; leaves must agree
        assert np.array_equal(a[leaf], b[leaf])
        assert not (a & ~b).any()


@needs_numba
@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("mode", list(ServiceMode))
def test_query_results_identical_on_both_paths(variant, mode):
    for seed in range(4):
        two = variant is Variant.TWO_POINT and mode is not ServiceMode.BINARY
        users, facs, psi = random_instance(900 + seed, points=(2, 2) if two else None)
        p = ServiceParams(psi, mode)
        tree = TQTree.build(users, beta=4, variant=variant, mode=mode, bounds=bounds_for(users, psi))
        idx = PointIndex(tree.table, bounds=tree.bounds, beta=4)

        def run():
            tree._flat = None
            return ([(r.id, r.units) for r in top_k_facilities(facs, len(facs), p, tree, use_z=True)],
                    [(r.id, r.units) for r in top_k_facilities(facs, len(facs), p, tree, use_z=False)],
                    [(r.id, r.units) for r in baseline_topk(facs, len(facs), p, idx)])
        a, b = both_paths(run)
        assert a == b
        assert a[0] == a[1] == a[2]


def test_backend_name_reflects_switch(monkeypatch):
    monkeypatch.setattr(K, "USE_NUMBA", False)
    assert K.backend() == "numpy"

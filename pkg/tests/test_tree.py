import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIG_BOUNDS, random_instance
from tqtree import SCALE, Rect, ServiceMode, TQTree, UserTrajectory, Variant, ZId
from tqtree.tree import MAX_DEPTH, bounds_for


def node_at(tree, depth, prefix):
    return next(n for n in tree.nodes() if n.depth == depth and n.prefix == prefix)


@pytest.fixture
def fig_tree(fig_users):
    return TQTree.build(fig_users, beta=2, bounds=FIG_BOUNDS)


def test_figure_layout(fig_tree):
    t = fig_tree
    assert sorted(t.root.user_ids) == ["u10", "u11"]  # cross the root's children
    q3 = node_at(t, 1, 2)
    assert not q3.is_leaf and all(c.is_leaf and len(c) == 0 for c in q3.children)
    assert [n.user_ids for n in (node_at(t, 1, 0), node_at(t, 1, 1), node_at(t, 1, 3))] == \
        [["u1", "u2"], ["u3", "u4"], ["u9", "u12"]]
    assert node_at(t, 1, 3).is_leaf and len(node_at(t, 1, 3)) == 2
    assert t.root.s_ub == 12 * SCALE and q3.s_ub == 4 * SCALE


def test_figure_z_ids_of_the_upper_left_node(fig_tree):
    q3 = node_at(fig_tree, 1, 2)
    got = [(k.user_id, str(k.start), str(k.end)) for k in q3.entry_keys()]
    assert got == [("u5", "0.0", "1.0"), ("u6", "0.0", "1.2"), ("u7", "0.3", "2"), ("u8", "2", "1.3")]
    zn = q3.znodes()
    assert [[k.user_id for k in z.entries] for z in zn] == [["u5", "u6"], ["u7", "u8"]]


def test_zid_order_and_prefixes():
    z = [ZId(s) for s in ["1", "0.1", "0", "0.0.3", "", "3.2"]]
    assert [str(x) for x in sorted(z)] == ["", "0", "0.0.3", "0.1", "1", "3.2"]
    assert ZId("0").is_prefix_of(ZId("0.2")) and not ZId("1").is_prefix_of(ZId("0.2"))
    assert ZId.from_prefix(0b1001, 3, 1) == ZId("2.1")
    with pytest.raises(ValueError):
        ZId("4")


def test_storage_per_variant():
    users = [UserTrajectory(i, [(i, 0), (i, 5), (i + 1, 9)]) for i in range(20)]
    bounds = bounds_for(users, 1.0)
    assert TQTree.build(users, 4, Variant.FULL, bounds).n_entries == 20
    assert TQTree.build(users, 4, Variant.SEGMENTED, bounds).n_entries == 40
    assert TQTree.build(users, 4, Variant.TWO_POINT, bounds).n_entries == 20  # binary: endpoints only
    with pytest.raises(ValueError):
        TQTree.build(users, 4, Variant.TWO_POINT, bounds, mode=ServiceMode.POINT_COUNT)


def test_bounds_errors():
    with pytest.raises(ValueError):
        TQTree.build([UserTrajectory(0, [(0, 0), (20, 0)])], bounds=Rect(0, 0, 10, 10))
    t = TQTree.build([UserTrajectory(0, [(0, 0), (1, 1)])], bounds=Rect(0, 0, 10, 10))
    with pytest.raises(ValueError):
        t.insert(UserTrajectory(0, [(2, 2), (3, 3)]))
    with pytest.raises(ValueError):
        t.insert(UserTrajectory(1, [(2, 2), (11, 3)]))
    with pytest.raises(ValueError):
        TQTree.build([], beta=0)


def test_coincident_points_stop_at_max_depth():
    users = [UserTrajectory(i, [(1, 1), (1, 1)]) for i in range(10)]
    t = TQTree.build(users, beta=2, bounds=Rect(0, 0, 4, 4))
    assert t.check_invariants() == []
    deepest = max(t.nodes(), key=lambda n: n.depth)
    assert deepest.depth == MAX_DEPTH and len(deepest) == 10


def test_cells_contain_their_entries():
    users, _, psi = random_instance(5, n_users=300, points=(2, 5))
    for variant in Variant:
        t = TQTree.build(users, beta=4, variant=variant, mode=ServiceMode.LENGTH if variant is not Variant.TWO_POINT
                         else ServiceMode.BINARY, bounds=bounds_for(users, psi))
        pts = {u.id: u.points for u in users}
        for n in t.nodes():
            c = n.cell
            for k in n.entry_keys():
                p = pts[k.user_id][list(k.point_index)]
                assert (p[:, 0] >= c.x0 - 1e-9).all() and (p[:, 0] <= c.x1 + 1e-9).all()
                assert (p[:, 1] >= c.y0 - 1e-9).all() and (p[:, 1] <= c.y1 + 1e-9).all()


def test_subtree_bound_is_sum_of_entry_bounds():
    users, _, psi = random_instance(6, n_users=200, points=(2, 4))
    t = TQTree.build(users, beta=3, variant=Variant.SEGMENTED, mode=ServiceMode.LENGTH,
                     bounds=bounds_for(users, psi))

    def total(n):
        own = int(t.e_bound[n.entries].sum())
        return own + (sum(total(c) for c in n.children) if n.children else 0)
    for n in t.nodes():
        assert n.s_ub == total(n)
    # each segment bound rounds its length share up and adds a two-unit margin
    assert len(users) * SCALE <= t.root.s_ub <= len(users) * SCALE + 3 * t.n_entries


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.sampled_from(list(Variant)), st.integers(1, 6))
def test_insert_equals_rebuild_in_same_order(seed, variant, beta):
    mode = ServiceMode.BINARY if variant is Variant.TWO_POINT else ServiceMode.POINT_COUNT
    users, _, psi = random_instance(seed, n_users=int(np.random.default_rng(seed).integers(1, 60)))
    bounds = bounds_for(users, psi)
    half = len(users) // 2
    t = TQTree.build(users[:half], beta=beta, variant=variant, mode=mode, bounds=bounds)
    for u in users[half:]:
        t.insert(u)
    fresh = TQTree.build(users, beta=beta, variant=variant, mode=mode, bounds=bounds)
    assert t.check_invariants() == []
    assert t.dumps() == fresh.dumps()


def test_snapshot_file_round_trip(tmp_path, fig_tree):
    a = tmp_path / "a.tqt"
    b = tmp_path / "b.tqt"
    fig_tree.save(a)
    TQTree.load(a).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_snapshot_rejects_tampering(fig_tree):
    lines = fig_tree.dumps().splitlines()
    head = json.loads(lines[0])
    node_line = 1 + head["users"]
    rec = json.loads(lines[node_line])
    rec["s_ub"] += 1
    bad = lines[:node_line] + [json.dumps(rec)] + lines[node_line + 1:]
    with pytest.raises(ValueError):
        TQTree.loads("\n".join(bad) + "\n")
    head["version"] = 99
    with pytest.raises(ValueError):
        TQTree.loads("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    q3 = next(i for i, l in enumerate(lines) if '"0.3"' in l)
    swapped = lines[q3].replace('"0.3"', '"0.2"')
    with pytest.raises(ValueError):
        TQTree.loads("\n".join(lines[:q3] + [swapped] + lines[q3 + 1:]) + "\n")


def test_find_user_and_stats(fig_tree):
    assert [(n.depth, n.prefix) for n in fig_tree.find_user("u7")] == [(1, 2)]
    s = fig_tree.stats()
    assert s["users"] == 12 and s["entries"] == 12 and s["beta"] == 2

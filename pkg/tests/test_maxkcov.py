from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from tqtree import FacilityTrajectory, ServiceMode, ServiceParams, TQTree, UserTrajectory, Variant, service_group
from tqtree.baseline import PointIndex
from tqtree.maxkcov import (BaselineProvider, ScanProvider, TreeProvider, exact_maxkcov, greedy_maxkcov,
                            greedy_over, two_step_greedy)
from tqtree.service import service_group_units
from tqtree.tree import bounds_for


def providers(users, mode, psi, beta=4):
    variant = Variant.TWO_POINT if mode is ServiceMode.BINARY else Variant.FULL
    tree = TQTree.build(users, beta=beta, variant=variant, mode=mode, bounds=bounds_for(users, psi))
    return [ScanProvider(users), BaselineProvider(PointIndex(users, beta=beta)),
            TreeProvider(tree, True), TreeProvider(tree, False)]


def test_figure_pairs(fig_users, fig_facilities, fig_params):
    by_pair = {frozenset(c): service_group(fig_users, c, fig_params)
               for c in combinations(fig_facilities, 2)}
    assert {tuple(sorted(f.id for f in k)): v for k, v in by_pair.items()} == \
        {(25, 46): 7.0, (25, 65): 5.0, (46, 65): 8.0}
    for prov in providers(fig_users, fig_params.mode, fig_params.psi, beta=2):
        g = greedy_maxkcov(fig_facilities, 2, fig_params, provider=prov)
        assert g.chosen == [46, 65] and g.value == 8.0 and g.gain_scores == [4.0, 4.0]
        assert two_step_greedy(fig_facilities, 2, fig_params, provider=prov).chosen == [46, 65]


def test_adding_x_helps_the_larger_set_more():
    users = [UserTrajectory("u", [(0, 0), (100, 0)]), UserTrajectory("v", [(0, 50), (10, 50)])]
    a = FacilityTrajectory("a", [(0, 50), (10, 50)])
    b = FacilityTrajectory("b", [(0, 1)])
    x = FacilityTrajectory("x", [(100, 1)])
    p = ServiceParams(2.0)
    gain_a = service_group(users, [a, x], p) - service_group(users, [a], p)
    gain_b = service_group(users, [a, b, x], p) - service_group(users, [a, b], p)
    assert (gain_a, gain_b) == (0.0, 1.0)


def test_greedy_can_miss_the_optimum():
    # Two complementary half-routes beat the single best route.
    users = [UserTrajectory(i, [(0, 10 * i), (100, 10 * i)]) for i in range(3)]
    users.append(UserTrajectory(9, [(500, 500), (501, 500)]))
    users.append(UserTrajectory(10, [(600, 600), (601, 600)]))
    west = FacilityTrajectory(1, [(0, 0), (0, 10), (0, 20)])
    east = FacilityTrajectory(2, [(100, 0), (100, 10), (100, 20)])
    two = FacilityTrajectory(0, [(500, 500), (600, 600)])
    p = ServiceParams(1.0)
    facs = [west, east, two]
    g = greedy_maxkcov(facs, 2, p, users=users)
    ex = exact_maxkcov(facs, 2, p, users=users)
    assert ex.chosen == [1, 2] and ex.value == 3.0
    assert g.chosen[0] == 0 and g.value == 2.0


@pytest.mark.parametrize("mode", [ServiceMode.BINARY, ServiceMode.LENGTH])
def test_joined_ends_can_exceed_sum_of_singles(mode):
    users = [UserTrajectory("u", [(0, 0), (50, 0)])]
    a, b = FacilityTrajectory("a", [(0, 1)]), FacilityTrajectory("b", [(50, 1)])
    p = ServiceParams(2.0, mode)
    assert service_group(users, [a], p) + service_group(users, [b], p) == 0.0
    assert exact_maxkcov([a, b], 2, p, users=users).value == 1.0


def test_kprime_equal_to_facility_count_is_plain_greedy():
    users, facs, psi = random_instance(12, n_fac=10)
    p = ServiceParams(psi, ServiceMode.POINT_COUNT)
    for prov in providers(users, p.mode, psi):
        a = greedy_maxkcov(facs, 3, p, provider=prov)
        b = two_step_greedy(facs, 3, p, kprime=len(facs), provider=prov)
        assert (a.chosen, a.units, a.gains) == (b.chosen, b.units, b.gains)


def test_argument_checks(fig_users, fig_facilities, fig_params):
    for fn in (greedy_maxkcov, exact_maxkcov, two_step_greedy):
        with pytest.raises(ValueError):
            fn(fig_facilities, 0, fig_params, users=fig_users)
        with pytest.raises(ValueError):
            fn(fig_facilities, 4, fig_params, users=fig_users)
    with pytest.raises(ValueError):
        two_step_greedy(fig_facilities, 2, fig_params, kprime=1, users=fig_users)
    with pytest.raises(ValueError):
        exact_maxkcov(fig_facilities, 2, fig_params, users=fig_users, budget=2)
    with pytest.raises(ValueError):
        greedy_maxkcov(fig_facilities, 1, fig_params)
    dup = fig_facilities + [FacilityTrajectory(25, [(0, 0)])]
    with pytest.raises(ValueError):
        greedy_maxkcov(dup, 1, fig_params, users=fig_users)


def brute_greedy(users, facs, k, p):
    """Greedy written directly against the group service function."""
    chosen = []
    for _ in range(k):
        best = None
        for f in sorted(facs, key=lambda f: f.id):
            if f in chosen:
                continue
            v = service_group_units(users, chosen + [f], p)
            if best is None or v > best[0]:
                best = (v, f)
        chosen.append(best[1])
    return [f.id for f in chosen], service_group_units(users, chosen, p)


@settings(max_examples=40)
@given(st.integers(0, 50_000), st.sampled_from(list(ServiceMode)), st.integers(1, 4))
def test_providers_agree_with_direct_greedy(seed, mode, k):
    rng = np.random.default_rng(seed)
    users, facs, psi = random_instance(seed, n_users=int(rng.integers(1, 80)), n_fac=int(rng.integers(k, 9)),
                                       points=(2, 2) if mode is ServiceMode.BINARY else None)
    p = ServiceParams(psi, mode)
    want = brute_greedy(users, facs, k, p)
    ex = exact_maxkcov(facs, k, p, users=users)
    assert want[1] <= ex.units
    if mode is ServiceMode.POINT_COUNT:
        # a union of served points never beats the sum of its parts
        singles = sorted((service_group_units(users, [f], p) for f in facs), reverse=True)
        assert ex.units <= sum(singles[:k])
    for prov in providers(users, mode, psi):
        g = greedy_maxkcov(facs, k, p, provider=prov)
        assert (g.chosen, g.units) == want
        assert exact_maxkcov(facs, k, p, provider=prov).units == ex.units


def test_greedy_over_ignores_unknown_rows():
    from tqtree.service import UserTable
    t = UserTable([UserTrajectory(0, [(0, 0), (1, 0)])])
    sol = greedy_over({"a": {}, "b": {0: frozenset({0, 1})}}, ["a", "b"], 1, t, ServiceMode.BINARY)
    assert sol.chosen == ["b"] and sol.value == 1.0

"""Choosing k facilities that together serve the most users.

The combined objective is not submodular, so greedy carries no guarantee;
the exact enumerator exists to measure how close greedy gets on small
instances.

Every solver works on coverage maps ``{facility id: {user row: served
point indices}}`` supplied by a provider (linear scan, point index or
TQ-tree), so the selection logic is shared by all three.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Hashable, Sequence

from .core import FacilityTrajectory, ServiceParams, UserTrajectory, id_sort_key
from .service import UserTable, coverage_scan, to_score

EXACT_BUDGET = 1_000_000


@dataclass
class CoverageSolution:
    chosen: list
    units: int
    gains: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def value(self) -> float:
        return to_score(self.units)

    @property
    def gain_scores(self) -> list[float]:
        return [to_score(g) for g in self.gains]


class ScanProvider:
    """Coverage by checking every user point against every stop."""

    name = "scan"

    def __init__(self, users: Sequence[UserTrajectory]):
        self.users = list(users)
        self.table = UserTable(self.users)

    def coverage(self, facilities, params: ServiceParams) -> dict:
        return {f.id: coverage_scan(self.users, f, params) for f in facilities}

    def topk(self, facilities, k: int, params: ServiceParams):
        from .baseline import linear_scan_topk
        return linear_scan_topk(self.users, facilities, k, params)


class BaselineProvider:
    """Coverage from per-stop range queries on a point index."""

    name = "BL"

    def __init__(self, idx):
        self.idx = idx
        self.table = idx.table

    def coverage(self, facilities, params: ServiceParams) -> dict:
        return {f.id: self.idx.coverage(f, params) for f in facilities}

    def topk(self, facilities, k: int, params: ServiceParams):
        from .baseline import baseline_topk
        return baseline_topk(facilities, k, params, self.idx)


class TreeProvider:
    """Coverage from TQ-tree relaxation, with or without z-order pruning."""

    def __init__(self, tree, use_z: bool = True):
        self.tree = tree
        self.use_z = use_z
        self.table = tree.table
        self.name = "TQ(Z)" if use_z else "TQ(B)"

    def coverage(self, facilities, params: ServiceParams) -> dict:
        from .kmaxrrst import tree_coverage
        return tree_coverage(self.tree, facilities, params, use_z=self.use_z)

    def topk(self, facilities, k: int, params: ServiceParams):
        from .kmaxrrst import top_k_facilities
        return top_k_facilities(facilities, k, params, self.tree, use_z=self.use_z)


def _provider(provider, users):
    if provider is not None:
        return provider
    if users is None:
        raise ValueError("pass either a coverage provider or the user trajectories")
    return ScanProvider(users)


def group_value(table: UserTable, covs: Sequence[dict], mode) -> int:
    merged: dict[int, set] = {}
    for cov in covs:
        for r, items in cov.items():
            merged.setdefault(r, set()).update(items)
    return sum(table.units(r, s, mode) for r, s in merged.items())


def _sorted_ids(facilities) -> list:
    ids = [f.id for f in facilities]
    if len(set(ids)) != len(ids):
        raise ValueError("facility ids must be unique")
    return sorted(ids, key=id_sort_key)


def greedy_over(coverage: dict, ids: Sequence[Hashable], k: int, table: UserTable, mode) -> CoverageSolution:
    """Greedy selection over precomputed coverage maps.

    Each round takes the facility with the largest gain in combined units;
    ties go to the lower id. Gains are recomputed only for facilities that
    share a user with the one just chosen, since no other gain can change.
    """
    ids = sorted(ids, key=id_sort_key)
    k = min(k, len(ids))
    cur: dict[int, set] = {}
    cur_units: dict[int, int] = {}
    users_of = {fid: coverage[fid] for fid in ids}
    by_row: dict[int, list] = {}
    for fid in ids:
        for r in users_of[fid]:
            by_row.setdefault(r, []).append(fid)

    def gain_of(fid) -> int:
        g = 0
        for r, items in users_of[fid].items():
            have = cur.get(r)
            if have is None:
                g += table.units(r, items, mode)
            elif not items <= have:
                g += table.units(r, have | items, mode) - cur_units[r]
        return g

    gains = {fid: gain_of(fid) for fid in ids}
    chosen, picked = [], []
    left = list(ids)
    for _ in range(k):
        best = max(left, key=lambda fid: (gains[fid], _neg(fid)))
        chosen.append(best)
        picked.append(gains[best])
        left.remove(best)
        touched = set()
        for r, items in users_of[best].items():
            s = cur.setdefault(r, set())
            if not items <= s:
                s.update(items)
                cur_units[r] = table.units(r, s, mode)
                touched.update(by_row[r])
            else:
                cur_units.setdefault(r, table.units(r, s, mode))
        for fid in touched:
            if fid in gains and fid != best and fid in left:
                gains[fid] = gain_of(fid)
    units = group_value(table, [users_of[f] for f in chosen], mode)
    return CoverageSolution(chosen, units, picked)


class _Neg:
    __slots__ = ("key",)

    def __init__(self, key):
        self.key = key

    def __lt__(self, other):
        return other.key < self.key

    def __eq__(self, other):
        return self.key == other.key


def _neg(fid):
    """Sort key that ranks lower ids higher under ``max``."""
    return _Neg(id_sort_key(fid))


def greedy_maxkcov(facilities: Sequence[FacilityTrajectory], k: int, params: ServiceParams,
                   provider=None, users=None) -> CoverageSolution:
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(facilities):
        raise ValueError(f"k={k} exceeds the {len(facilities)} facilities available")
    t0 = time.perf_counter()
    prov = _provider(provider, users)
    ids = _sorted_ids(facilities)
    cov = prov.coverage(facilities, params)
    sol = greedy_over(cov, ids, k, prov.table, params.mode)
    sol.elapsed = time.perf_counter() - t0
    return sol


def exact_maxkcov(facilities: Sequence[FacilityTrajectory], k: int, params: ServiceParams,
                  provider=None, users=None, budget: int = EXACT_BUDGET) -> CoverageSolution:
    """Best group by enumerating every combination; ties go to the smallest id list."""
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(facilities)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} facilities available")
    total = math.comb(n, k)
    if total > budget:
        raise ValueError(f"{total} combinations exceed the enumeration budget of {budget}")
    t0 = time.perf_counter()
    prov = _provider(provider, users)
    ids = _sorted_ids(facilities)
    cov = prov.coverage(facilities, params)
    best, best_units = None, -1
    for combo in combinations(ids, k):
        u = group_value(prov.table, [cov[f] for f in combo], params.mode)
        if u > best_units:
            best, best_units = combo, u
    return CoverageSolution(list(best), best_units, [], time.perf_counter() - t0)


def two_step_greedy(facilities: Sequence[FacilityTrajectory], k: int, params: ServiceParams,
                    kprime: int | None = None, provider=None, users=None) -> CoverageSolution:
    """Greedy restricted to the ``kprime`` best individual facilities (default ``4k``)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(facilities)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} facilities available")
    kprime = min(4 * k if kprime is None else kprime, n)
    if kprime < k:
        raise ValueError("kprime must be at least k")
    t0 = time.perf_counter()
    prov = _provider(provider, users)
    cand = {r.id for r in prov.topk(facilities, kprime, params)}
    pool = [f for f in facilities if f.id in cand]
    cov = prov.coverage(pool, params)
    sol = greedy_over(cov, [f.id for f in pool], k, prov.table, params.mode)
    sol.elapsed = time.perf_counter() - t0
    return sol

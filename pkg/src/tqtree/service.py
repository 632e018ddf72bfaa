"""Service values of facilities for user trajectories.

Scores are accumulated in fixed-point *units*: a user's score in [0, 1] is
stored as ``floor(score * SCALE)``. Unit totals are plain integers, so sums
are exact and independent of evaluation order; every path (linear scan,
point index, TQ-tree) therefore reports bit-identical totals, and the
best-first search can compare bounds without rounding slop. Binary scores
and fractions with power-of-two denominators are represented exactly.
"""
from __future__ import annotations

import math
from typing import Hashable, Iterable, Sequence

import numpy as np

from .core import (FacilityComponent, FacilityTrajectory, ServiceMode, ServiceParams,
                   UserTrajectory, segment_lengths)

SCALE = 1 << 40


def quantize(score: float) -> int:
    return math.floor(score * SCALE)


def to_score(units: int) -> float:
    return units / SCALE


class UserTable:
    """Per-user constants needed to score a set of served items."""

    def __init__(self, users: Sequence[UserTrajectory]):
        self.users = list(users)
        self.ids = [u.id for u in self.users]
        self.row_of = {}
        for r, uid in enumerate(self.ids):
            if uid in self.row_of:
                raise ValueError(f"duplicate user trajectory id {uid!r}")
            self.row_of[uid] = r
        self.n = [len(u) for u in self.users]
        self.seglens = [segment_lengths(u.points) for u in self.users]
        self.length = [math.fsum(s) for s in self.seglens]

    def __len__(self) -> int:
        return len(self.users)

    def append(self, u: UserTrajectory) -> int:
        if u.id in self.row_of:
            raise ValueError(f"duplicate user trajectory id {u.id!r}")
        r = len(self.users)
        self.users.append(u)
        self.ids.append(u.id)
        self.row_of[u.id] = r
        self.n.append(len(u))
        sl = segment_lengths(u.points)
        self.seglens.append(sl)
        self.length.append(math.fsum(sl))
        return r

    def score(self, row: int, items, mode: ServiceMode, by_segment: bool = False) -> float:
        if by_segment:
            return score_segments(self.n[row], self.seglens[row], self.length[row], items)
        return score_items(mode, self.n[row], self.seglens[row], self.length[row], items)

    def units(self, row: int, items, mode: ServiceMode, by_segment: bool = False) -> int:
        return quantize(self.score(row, items, mode, by_segment))


def score_items(mode: ServiceMode, n: int, seglens, length: float, items) -> float:
    """Score of one user given its served items.

    Items are served point indices. In length mode a segment counts when
    both of its endpoints are served; a zero-length trajectory weights its
    segments equally.
    """
    if mode is ServiceMode.BINARY:
        return 1.0 if (0 in items and (n - 1) in items) else 0.0
    if mode is ServiceMode.POINT_COUNT:
        return len(items) / n
    return score_segments(n, seglens, length, [j for j in items if j + 1 in items])


def score_segments(n: int, seglens, length: float, segs) -> float:
    """Length score of one user given the indices of its served segments."""
    if not segs:
        return 0.0
    if length > 0.0:
        return min(1.0, math.fsum(seglens[j] for j in segs) / length)
    return len(segs) / (n - 1)


def served_items(mode: ServiceMode, mask: np.ndarray) -> set[int]:
    """Items credited by one facility given the per-point served mask."""
    n = mask.shape[0]
    if mode is ServiceMode.BINARY:
        return {i for i in (0, n - 1) if mask[i]}
    return set(np.flatnonzero(mask).tolist())


def served_mask(points: np.ndarray, stops: np.ndarray, psi: float) -> np.ndarray:
    """Brute-force served test of every point against every stop."""
    if stops.shape[0] == 0:
        return np.zeros(points.shape[0], dtype=bool)
    dx = points[:, 0, None] - stops[None, :, 0]
    dy = points[:, 1, None] - stops[None, :, 1]
    return ((dx * dx + dy * dy) <= psi * psi).any(axis=1)


def _stops_of(f) -> np.ndarray:
    return f.stops if isinstance(f, (FacilityTrajectory, FacilityComponent)) else np.asarray(f, float)


def service_single(u: UserTrajectory, f, params: ServiceParams) -> float:
    mask = served_mask(u.points, _stops_of(f), params.psi)
    sl = segment_lengths(u.points)
    return score_items(params.mode, len(u), sl, math.fsum(sl), served_items(params.mode, mask))


def coverage_scan(users: Sequence[UserTrajectory], f, params: ServiceParams) -> dict[int, frozenset]:
    """Linear scan: user row -> items served by ``f`` (rows with no items omitted)."""
    stops = _stops_of(f)
    out = {}
    if not users:
        return out
    lens = np.fromiter((len(u) for u in users), dtype=np.int64, count=len(users))
    pts = np.concatenate([u.points for u in users])
    mask = served_mask(pts, stops, params.psi)
    offs = np.concatenate([[0], np.cumsum(lens)])
    hit_rows = np.unique(np.searchsorted(offs, np.flatnonzero(mask), side="right") - 1)
    for r in hit_rows.tolist():
        items = served_items(params.mode, mask[offs[r]:offs[r + 1]])
        if items:
            out[r] = frozenset(items)
    return out


def service_set_units(users: Sequence[UserTrajectory], f, params: ServiceParams,
                      table: UserTable | None = None) -> int:
    table = table or UserTable(users)
    cov = coverage_scan(users, f, params)
    return sum(table.units(r, items, params.mode) for r, items in cov.items())


def service_set(users: Sequence[UserTrajectory], f, params: ServiceParams) -> float:
    """Total service of one facility over a set of users."""
    return to_score(service_set_units(users, f, params))


def group_units(table: UserTable, coverages: Iterable[dict], mode: ServiceMode) -> int:
    merged: dict[int, set] = {}
    for cov in coverages:
        for r, items in cov.items():
            merged.setdefault(r, set()).update(items)
    return sum(table.units(r, items, mode) for r, items in merged.items())


def service_group_units(users: Sequence[UserTrajectory], group: Sequence, params: ServiceParams,
                        table: UserTable | None = None) -> int:
    if len(group) == 0:
        raise ValueError("facility group must be nonempty")
    table = table or UserTable(users)
    return group_units(table, (coverage_scan(users, f, params) for f in group), params.mode)


def service_group(users: Sequence[UserTrajectory], group: Sequence, params: ServiceParams) -> float:
    """Combined service of a facility group; each served item counts once per user.

    In binary mode a user counts when its source is served by some member and
    its destination by some (possibly different) member.
    """
    return to_score(service_group_units(users, group, params))


class ServiceLedger:
    """Served items per user row, accumulated across the calls of one evaluation.

    Adding the same items twice is a no-op, so partial credit found in
    different subspaces merges without double counting. Items are served
    point indices, or segment indices when ``by_segment`` is set (length
    mode only).
    """

    __slots__ = ("table", "mode", "by_segment", "items", "units", "total")

    def __init__(self, table: UserTable, mode: ServiceMode, by_segment: bool = False):
        self.table = table
        self.mode = ServiceMode(mode)
        self.by_segment = bool(by_segment)
        self.items: dict[int, set] = {}
        self.units: dict[int, int] = {}
        self.total = 0

    def add(self, row: int, new_items) -> int:
        cur = self.items.get(row)
        if cur is None:
            cur = self.items[row] = set(new_items)
        else:
            before = len(cur)
            cur.update(new_items)
            if len(cur) == before:
                return 0
        u = self.table.units(row, cur, self.mode, self.by_segment)
        delta = u - self.units.get(row, 0)
        self.units[row] = u
        self.total += delta
        return delta

    def add_complete(self, rows) -> int:
        """Binary fast path: rows whose source and destination are both served."""
        delta = 0
        n = self.table.n
        for r in rows:
            if self.units.get(r, 0) == SCALE:
                continue
            self.items[r] = {0, n[r] - 1}
            self.units[r] = SCALE
            delta += SCALE
        self.total += delta
        return delta

    def merge(self, other: "ServiceLedger") -> "ServiceLedger":
        out = self.copy()
        for r, items in other.items.items():
            out.add(r, items)
        return out

    def copy(self) -> "ServiceLedger":
        out = ServiceLedger(self.table, self.mode, self.by_segment)
        out.items = {r: set(s) for r, s in self.items.items()}
        out.units = dict(self.units)
        out.total = self.total
        return out

    @property
    def value(self) -> float:
        return to_score(self.total)

    @property
    def users_served(self) -> int:
        return sum(1 for u in self.units.values() if u > 0)

    def coverage(self) -> dict[int, frozenset]:
        return {r: frozenset(s) for r, s in self.items.items() if s}


class UnionState:
    """Union-find over component ids; the smaller id becomes the root."""

    def __init__(self):
        self.parent: dict[int, int] = {}
        self.facility: dict[int, Hashable] = {}

    def add(self, cid: int, facility_id: Hashable = None) -> None:
        if cid not in self.parent:
            self.parent[cid] = cid
            self.facility[cid] = facility_id

    def find(self, cid: int) -> int:
        root = cid
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[cid] != root:
            self.parent[cid], cid = root, self.parent[cid]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        lo, hi = (ra, rb) if ra < rb else (rb, ra)
        self.parent[hi] = lo
        return lo

    def sets(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for c in sorted(self.parent):
            groups.setdefault(self.find(c), []).append(c)
        return list(groups.values())


def make_union(components: Iterable[FacilityComponent]) -> UnionState:
    """Group components so that all fragments of one facility share a root."""
    us = UnionState()
    first: dict[Hashable, int] = {}
    for c in components:
        us.add(c.component_id, c.facility_id)
        if c.facility_id in first:
            us.union(first[c.facility_id], c.component_id)
        else:
            first[c.facility_id] = c.component_id
    return us

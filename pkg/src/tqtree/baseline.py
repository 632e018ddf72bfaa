"""Comparators: a point quadtree with per-stop range queries, and a linear scan.

The point index answers one circular range query per facility stop, folds
the hits into per-user served sets and scores them with the same code as
every other path, so any disagreement points at indexing, not scoring.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels as K
from .core import FacilityTrajectory, Point, Rect, ServiceMode, ServiceParams, UserTrajectory, \
    id_sort_key, slack
from .kmaxrrst import RankedFacility
from .service import ServiceLedger, UserTable, coverage_scan, to_score
from .tree import bounds_for


class PointIndex:
    """Quadtree over every user point, stored as Morton-sorted leaf runs."""

    def __init__(self, users: Sequence[UserTrajectory] | UserTable, beta: int = 64,
                 bounds: Rect | None = None):
        self.table = users if isinstance(users, UserTable) else UserTable(users)
        self.beta = int(beta)
        users = self.table.users
        self.bounds = bounds or bounds_for(users)
        if users:
            pts = np.concatenate([u.points for u in users])
            lens = np.array(self.table.n, np.int64)
        else:
            pts = np.zeros((0, 2))
            lens = np.zeros(0, np.int64)
        owner = np.repeat(np.arange(lens.shape[0], dtype=np.int64), lens)
        starts = np.cumsum(lens) - lens
        pidx = np.arange(pts.shape[0], dtype=np.int64) - np.repeat(starts, lens)
        codes = K.morton_codes(pts[:, 0], pts[:, 1], self.bounds.as_tuple())
        order = np.argsort(codes, kind="stable")
        self.px = np.ascontiguousarray(pts[order, 0])
        self.py = np.ascontiguousarray(pts[order, 1])
        self.owner = owner[order]
        self.pidx = pidx[order]
        (self.p_depth, self.p_prefix, self.p_lo, self.p_hi, self.p_skip, _,
         _) = K.partition(codes[order], 0, self.beta)
        self._buf = np.empty(max(1, self.px.shape[0]), np.int64)

    def __len__(self) -> int:
        return int(self.px.shape[0])

    def query_positions(self, cx: float, cy: float, psi: float) -> np.ndarray:
        lim = slack(psi, self.bounds)
        return K.range_query(self.p_depth, self.p_prefix, self.p_skip, self.p_lo, self.p_hi,
                             self.bounds.as_tuple(), self.px, self.py, float(cx), float(cy),
                             psi * psi, lim * lim, self._buf)

    def coverage(self, f: FacilityTrajectory, params: ServiceParams) -> dict:
        """User row -> served point indices, from one range query per stop."""
        hits = [self.query_positions(x, y, params.psi) for x, y in f.stops]
        pos = np.unique(np.concatenate(hits)) if hits else np.zeros(0, np.int64)
        out: dict[int, set] = {}
        binary = params.mode is ServiceMode.BINARY
        n = self.table.n
        for r, i in zip(self.owner[pos].tolist(), self.pidx[pos].tolist()):
            if binary and i != 0 and i != n[r] - 1:
                continue
            out.setdefault(r, set()).add(i)
        return {r: frozenset(s) for r, s in out.items()}


def range_query(idx: PointIndex, center, psi: float) -> list[tuple[Point, object, int]]:
    """Indexed points within ``psi`` of ``center`` as (point, owner id, point index)."""
    if psi <= 0:
        raise ValueError("psi must be positive")
    pos = idx.query_positions(center[0], center[1], psi)
    ids = idx.table.ids
    hits = [(Point(float(idx.px[p]), float(idx.py[p])), ids[int(idx.owner[p])], int(idx.pidx[p]))
            for p in pos.tolist()]
    hits.sort(key=lambda h: (idx.table.row_of[h[1]], h[2]))
    return hits


def baseline_units(idx: PointIndex, f: FacilityTrajectory, params: ServiceParams) -> tuple[int, int]:
    led = ServiceLedger(idx.table, params.mode)
    for r, items in idx.coverage(f, params).items():
        led.add(r, items)
    return led.total, led.users_served


def baseline_service(idx: PointIndex, f: FacilityTrajectory, params: ServiceParams) -> float:
    return to_score(baseline_units(idx, f, params)[0])


def _rank(facilities, units):
    order = sorted(range(len(facilities)), key=lambda i: (-units[i][0], id_sort_key(facilities[i].id)))
    return [RankedFacility(facilities[i].id, to_score(units[i][0]), units[i][0], units[i][1])
            for i in order]


def baseline_topk(facilities: Sequence[FacilityTrajectory], k: int, params: ServiceParams,
                  idx: PointIndex) -> list[RankedFacility]:
    """Score every facility through the point index, then rank."""
    if k < 1:
        raise ValueError("k must be at least 1")
    facilities = list(facilities)
    return _rank(facilities, [baseline_units(idx, f, params) for f in facilities])[:k]


def linear_scan_topk(users: Sequence[UserTrajectory], facilities: Sequence[FacilityTrajectory], k: int,
                     params: ServiceParams) -> list[RankedFacility]:
    """Reference answer: every point against every stop, no index."""
    if k < 1:
        raise ValueError("k must be at least 1")
    table = UserTable(users)
    facilities = list(facilities)
    units = []
    for f in facilities:
        led = ServiceLedger(table, params.mode)
        for r, items in coverage_scan(users, f, params).items():
            led.add(r, items)
        units.append((led.total, led.users_served))
    return _rank(facilities, units)[:k]

"""Top-k facility search over a TQ-tree.

A facility is evaluated by pairing q-nodes with the subset of its stops that
can serve users inside the node's cell. Relaxing a pair scores the node's own
list and replaces the pair with child pairs. The best-first search keeps one
state per facility keyed by ``fserve = aserve + hserve``: the score confirmed
so far plus the subtree bounds of the pairs still open. Because the bound is
admissible, the first ``k`` states that pop with nothing left to open are the
exact answer.
"""
from __future__ import annotations

import heapq
import time
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from . import _kernels as K
from .core import (FacilityComponent, FacilityTrajectory, Rect, ServiceMode, ServiceParams, embr,
                   id_sort_key, slack)
from .service import ServiceLedger, to_score
from .tree import QNode, TQTree, Variant, ZId


def needs_every_point(mode: ServiceMode, variant: Variant) -> bool:
    """True when an entry earns credit only if all of its points are served."""
    if mode is ServiceMode.BINARY:
        return variant is Variant.TWO_POINT
    if mode is ServiceMode.LENGTH:
        return variant is not Variant.FULL
    return False


def needs_both_ends(mode: ServiceMode, variant: Variant) -> bool:
    """True when pruning may demand both start and end partitions be covered."""
    return needs_every_point(mode, variant) or (mode is ServiceMode.BINARY and variant is Variant.FULL)


@dataclass(frozen=True)
class RankedFacility:
    id: Hashable
    score: float
    units: int
    users_served: int


@dataclass
class ExplorationState:
    """One facility's progress through the tree.

    ``pairs`` are parallel arrays: node index, stop-list offsets into
    ``sidx``, stop indices (into the query's stop arrays) and whether the
    pair descends into children or only scores the node's own list.
    """

    fid: Hashable
    rank: int
    node: np.ndarray
    soff: np.ndarray
    sidx: np.ndarray
    desc: np.ndarray
    aserve: int
    hserve: int
    ledger: ServiceLedger
    relaxations: int = 0

    @property
    def fserve(self) -> int:
        return self.aserve + self.hserve

    @property
    def done(self) -> bool:
        return self.node.shape[0] == 0

    @property
    def id(self) -> Hashable:
        return self.fid


@dataclass
class RelaxTrace:
    """Per-relaxation record used to audit bound soundness."""

    fid: Hashable
    before: int
    after: int


class Query:
    """Evaluation context binding a tree, a facility set and service parameters."""

    def __init__(self, tree: TQTree, facilities: Sequence[FacilityTrajectory], params: ServiceParams,
                 use_z: bool = True, coverage: bool = False):
        if params.mode is not tree.mode:
            raise ValueError(f"tree was built for {tree.mode.value} service, query asks for "
                             f"{params.mode.value}")
        self.tree = tree
        self.params = params
        self.flat = tree.flat()
        self.use_z = bool(use_z)
        self.facilities = list(facilities)
        ids = [f.id for f in self.facilities]
        if len(set(ids)) != len(ids):
            raise ValueError("facility ids must be unique")
        order = sorted(range(len(ids)), key=lambda i: id_sort_key(ids[i]))
        self.rank = np.empty(len(ids), np.int64)
        self.rank[order] = np.arange(len(ids))
        counts = [len(f) for f in self.facilities]
        self.f_off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        stops = (np.concatenate([f.stops for f in self.facilities]) if self.facilities
                 else np.zeros((0, 2)))
        self.fsx = np.ascontiguousarray(stops[:, 0])
        self.fsy = np.ascontiguousarray(stops[:, 1])
        mode, variant = params.mode, tree.variant
        self.coverage = coverage
        if coverage:
            # report every served point so that groups can combine partial service
            self.kmode = K.BINARY if mode is ServiceMode.BINARY else K.POINT_COUNT
            self.need_all = False
            self.and_mode = False
        else:
            self.kmode = mode.code
            self.need_all = needs_every_point(mode, variant)
            self.and_mode = needs_both_ends(mode, variant)
        self.by_segment = (not coverage and mode is ServiceMode.LENGTH
                           and variant is Variant.SEGMENTED)
        b = tree.bounds
        self.bounds = b.as_tuple()
        self.lim = slack(params.psi, b)
        self.lim2 = self.lim * self.lim

    # ------------------------------------------------------------------

    def _stops_near(self, sidx: np.ndarray, node: int) -> np.ndarray:
        fl = self.flat
        x0, y0, x1, y1 = K.cell_rects(fl.n_depth[node:node + 1], fl.n_prefix[node:node + 1], self.bounds)
        keep = K.stops_near_rect(self.fsx[sidx], self.fsy[sidx], (x0[0], y0[0], x1[0], y1[0]), self.lim2)
        return sidx[keep]

    def containing(self, fi: int) -> int:
        """Index of the deepest node whose cell holds the facility's EMBR, or -1."""
        f = self.facilities[fi]
        return containing_index(self.tree, self.flat, embr(f, self.params.psi))

    def new_ledger(self) -> ServiceLedger:
        return ServiceLedger(self.tree.table, self.params.mode, self.by_segment)

    def initial_state(self, fi: int) -> ExplorationState:
        fl = self.flat
        f = self.facilities[fi]
        led = self.new_ledger()
        q = self.containing(fi)
        nodes, lists, desc = [], [], []
        hserve = 0
        if q >= 0:
            sidx = self._stops_near(np.arange(self.f_off[fi], self.f_off[fi + 1]), q)
            if sidx.shape[0]:
                nodes.append(q)
                lists.append(sidx)
                desc.append(True)
                hserve += int(fl.n_sub[q])
                if not self.need_all:
                    # entries above q may still have some points inside q's cell
                    a = int(fl.n_parent[q])
                    while a >= 0:
                        if fl.n_ul[a, 1] > fl.n_ul[a, 0]:
                            nodes.append(a)
                            lists.append(sidx)
                            desc.append(False)
                            hserve += int(fl.n_own[a])
                        a = int(fl.n_parent[a])
        soff = np.concatenate([[0], np.cumsum([s.shape[0] for s in lists])]).astype(np.int64)
        return ExplorationState(
            f.id, int(self.rank[fi]), np.asarray(nodes, np.int64), soff,
            np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, np.int64),
            np.asarray(desc, bool), 0, hserve, led)

    def run_kernel(self, node, soff, sidx, desc, exact=True):
        fl = self.flat
        x0, y0, x1, y1 = self.bounds
        return K.relax_pairs(
            node, soff, sidx, desc, self.fsx, self.fsy,
            fl.n_depth, fl.n_prefix, fl.n_child, fl.n_ul, fl.n_parts, fl.n_sub,
            fl.b_poff, fl.b_user, fl.b_px, fl.b_py, fl.b_pidx, fl.b_pleaf, fl.u_n,
            fl.p_depth, fl.p_prefix, fl.p_skip, fl.p_lo, fl.p_hi,
            float(x0), float(y0), float(x1 - x0), float(y1 - y0), float(self.params.psi2),
            float(self.lim2), int(self.kmode), bool(self.and_mode), bool(self.need_all),
            bool(self.use_z), bool(exact))

    def credit(self, ledger: ServiceLedger, em_pos, em_foff, em_flags) -> int:
        """Fold emitted entries into ``ledger``; returns the unit gain."""
        fl = self.flat
        if em_pos.shape[0] == 0:
            return 0
        rows = fl.b_user[em_pos]
        if self.need_all and self.params.mode is ServiceMode.BINARY:
            return ledger.add_complete(rows.tolist())
        gain = 0
        binary = self.params.mode is ServiceMode.BINARY
        for i in range(em_pos.shape[0]):
            e = int(em_pos[i])
            a, b = int(fl.b_poff[e]), int(fl.b_poff[e + 1])
            flags = em_flags[em_foff[i]:em_foff[i + 1]]
            pidx = fl.b_pidx[a:b][flags]
            row = int(rows[i])
            if self.by_segment:
                items = (int(pidx[0]),)
            elif binary:
                last = int(fl.u_n[row]) - 1
                items = [int(p) for p in pidx if p == 0 or p == last]
            else:
                items = pidx.tolist()
            if items:
                gain += ledger.add(row, items)
        return gain

    def relax(self, s: ExplorationState) -> ExplorationState:
        """Score every open pair's node list and open the child pairs."""
        em_pos, em_foff, em_flags, ch_node, ch_soff, ch_sidx, hsum = self.run_kernel(
            s.node, s.soff, s.sidx, s.desc)
        self.credit(s.ledger, em_pos, em_foff, em_flags)
        return ExplorationState(s.fid, s.rank, ch_node, ch_soff, ch_sidx,
                                np.ones(ch_node.shape[0], bool), s.ledger.total, int(hsum),
                                s.ledger, s.relaxations + 1)

    def evaluate(self, fi: int) -> ExplorationState:
        s = self.initial_state(fi)
        while not s.done:
            s = self.relax(s)
        return s

    def result(self, s: ExplorationState) -> RankedFacility:
        return RankedFacility(s.fid, to_score(s.aserve), s.aserve, s.ledger.users_served)


def containing_index(tree: TQTree, flat, rect: Rect) -> int:
    b = tree.bounds
    if not b.intersects(rect):
        return -1
    node = 0
    if not b.contains_rect(rect):
        return node
    bt = b.as_tuple()
    while flat.n_child[node, 0] >= 0:
        kids = flat.n_child[node]
        x0, y0, x1, y1 = K.cell_rects(flat.n_depth[kids], flat.n_prefix[kids], bt)
        inside = ((x0 <= rect.x0) & (y0 <= rect.y0) & (rect.x1 <= x1) & (rect.y1 <= y1))
        hit = np.flatnonzero(inside)
        if hit.shape[0] == 0:
            break
        node = int(kids[hit[0]])
    return node


def containing_qnode(tree: TQTree, f: FacilityTrajectory, psi: float) -> QNode | None:
    """Deepest q-node whose cell contains the facility's EMBR.

    Returns the root when the EMBR sticks out of the index bounds and None
    when it misses them entirely (the facility can serve nobody).
    """
    flat = tree.flat()
    i = containing_index(tree, flat, embr(f, psi))
    return None if i < 0 else flat.nodes[i]


def top_k_facilities(facilities: Sequence[FacilityTrajectory], k: int, params: ServiceParams,
                     tree: TQTree, use_z: bool = True, eager: bool = False,
                     trace: Callable[[RelaxTrace], None] | None = None) -> list[RankedFacility]:
    """The ``k`` facilities serving the most users, best first; ties go to the lower id.

    ``eager`` evaluates every facility completely and sorts, instead of the
    best-first search. ``trace`` receives one record per relaxation.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not facilities:
        raise ValueError("facility set is empty")
    q = Query(tree, facilities, params, use_z=use_z)
    n = len(q.facilities)
    k = min(k, n)
    if eager:
        done = [q.evaluate(i) for i in range(n)]
        done.sort(key=lambda s: (-s.aserve, s.rank))
        return [q.result(s) for s in done[:k]]
    heap = []
    for i in range(n):
        s = q.initial_state(i)
        heap.append((-s.fserve, s.rank, i, s))
    heapq.heapify(heap)
    out = []
    while heap and len(out) < k:
        _, rank, i, s = heapq.heappop(heap)
        if s.done:
            out.append(q.result(s))
            continue
        r = q.relax(s)
        if trace is not None:
            trace(RelaxTrace(s.fid, s.fserve, r.fserve))
        heapq.heappush(heap, (-r.fserve, rank, i, r))
    return out


def facility_service(tree: TQTree, facilities: Sequence[FacilityTrajectory], params: ServiceParams,
                     use_z: bool = True) -> dict:
    """Exact service value of every facility, by full relaxation."""
    q = Query(tree, facilities, params, use_z=use_z)
    return {f.id: to_score(q.evaluate(i).aserve) for i, f in enumerate(q.facilities)}


def tree_coverage(tree: TQTree, facilities: Sequence[FacilityTrajectory], params: ServiceParams,
                  use_z: bool = True) -> dict:
    """Facility id -> {user row: served point indices} from the tree."""
    q = Query(tree, facilities, params, use_z=use_z, coverage=True)
    return {f.id: q.evaluate(i).ledger.coverage() for i, f in enumerate(q.facilities)}


# ----------------------------------------------------------------------
# Recursive evaluation


def _component_query(tree: TQTree, f, params: ServiceParams, use_z: bool) -> tuple[Query, np.ndarray]:
    fac = FacilityTrajectory(f.facility_id if isinstance(f, FacilityComponent) else f.id, f.stops) \
        if len(f) else None
    if fac is None:
        return None, np.zeros(0, np.int64)
    q = Query(tree, [fac], params, use_z=use_z)
    return q, np.arange(len(fac), dtype=np.int64)


def _node_index(tree: TQTree, node: QNode | None) -> int:
    flat = tree.flat()
    if node is None:
        return 0
    if node.index < 0 or node.index >= len(flat.nodes) or flat.nodes[node.index] is not node:
        raise ValueError("node does not belong to this tree")
    return node.index


def evaluate_node_trajectories(tree: TQTree, node: QNode, f, params: ServiceParams,
                               ledger: ServiceLedger | None = None, use_z: bool = True) -> float:
    """Service gained from the entries stored at ``node`` itself.

    Credit is recorded in ``ledger`` (a fresh one when omitted), so evaluating
    the same pair twice adds nothing the second time.
    """
    q, sidx = _component_query(tree, f, params, use_z)
    if q is None or len(node) == 0:
        return 0.0
    ledger = ledger if ledger is not None else q.new_ledger()
    i = _node_index(tree, node)
    em = q.run_kernel(np.array([i], np.int64), np.array([0, sidx.shape[0]], np.int64), sidx,
                      np.zeros(1, bool))
    return to_score(q.credit(ledger, *em[:3]))


def evaluate_service(tree: TQTree, f, params: ServiceParams, node: QNode | None = None,
                     ledger: ServiceLedger | None = None, use_z: bool = True) -> float:
    """Service of ``f`` over every entry stored in ``node``'s subtree.

    Children are visited with the stops that can reach their cells; the
    node's own list is scored with the component as passed in.
    """
    q, sidx = _component_query(tree, f, params, use_z)
    if q is None:
        return 0.0
    ledger = ledger if ledger is not None else q.new_ledger()
    start = _node_index(tree, node)
    sidx = q._stops_near(sidx, start)

    def visit(nd: int, stops: np.ndarray) -> int:
        if stops.shape[0] == 0:
            return 0
        em_pos, em_foff, em_flags, ch_node, ch_soff, ch_sidx, _ = q.run_kernel(
            np.array([nd], np.int64), np.array([0, stops.shape[0]], np.int64), stops,
            np.ones(1, bool))
        got = 0
        for c in range(ch_node.shape[0]):
            got += visit(int(ch_node[c]), ch_sidx[ch_soff[c]:ch_soff[c + 1]])
        return got + q.credit(ledger, em_pos, em_foff, em_flags)

    return to_score(visit(start, sidx))


def z_reduce(tree: TQTree, node: QNode, f, params: ServiceParams) -> list:
    """Entries of ``node`` whose z-ids fall in partitions ``f`` can reach.

    Returns entry keys in z-order; a superset of the entries ``f`` serves.
    """
    q, sidx = _component_query(tree, f, params, True)
    if q is None or len(node) == 0:
        return []
    i = _node_index(tree, node)
    em_pos = q.run_kernel(np.array([i], np.int64), np.array([0, sidx.shape[0]], np.int64), sidx,
                          np.zeros(1, bool), exact=False)[0]
    lo = int(q.flat.n_ul[i, 0])
    return [tree.entry_key(node, int(e) - lo) for e in em_pos]


def z_reduce_ids(entries, covered, both_ends: bool = True) -> list:
    """Filter ``(key, start z-id, end z-id)`` triples by a covered z-id set.

    With ``both_ends`` an entry survives when both its start and end z-ids
    are covered; otherwise one covered end is enough.
    """
    cov = {ZId(z) if isinstance(z, str) else z for z in covered}

    def has(z):
        return (ZId(z) if isinstance(z, str) else z) in cov

    out = []
    for key, s, e in entries:
        ok = (has(s) and has(e)) if both_ends else (has(s) or has(e))
        if ok:
            out.append(key)
    return out


def timed_top_k(*args, **kwargs):
    t0 = time.perf_counter()
    res = top_k_facilities(*args, **kwargs)
    return res, time.perf_counter() - t0

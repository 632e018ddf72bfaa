"""The TQ-tree: a quadtree of q-nodes whose trajectory lists are z-ordered.

Each q-node keeps the entries (whole trajectories, consecutive point pairs,
or endpoint pairs, depending on the variant) that cannot be pushed into a
single child. The node's list is sorted by hierarchical z-ids of the entry
points and cut into buckets of ``beta`` entries (z-nodes).

All geometry is derived from 64-bit Morton codes on a fixed ``2**32`` grid
over the world bounds, so cells are exact and placement is reproducible.
"""
from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass
from functools import total_ordering
from typing import Hashable, Iterable, Sequence

import numpy as np

from . import _kernels as K
from .core import Rect, ServiceMode, UserTrajectory
from .service import SCALE, UserTable

MAX_DEPTH = 24
SNAPSHOT_FORMAT = "tqtree-snapshot"
SNAPSHOT_VERSION = 1


class Variant(str, enum.Enum):
    TWO_POINT = "two-point"
    SEGMENTED = "segmented"
    FULL = "full"


@total_ordering
class ZId:
    """Hierarchical z-order identifier of a partition below a q-node.

    Digits compare left to right and a prefix orders before its extensions,
    so ``ZId("0") < ZId("0.0") < ZId("0.1") < ZId("1")``.
    """

    __slots__ = ("digits",)

    def __init__(self, digits: Iterable[int] | str = ()):
        if isinstance(digits, str):
            digits = [int(c) for c in digits.split(".")] if digits else []
        self.digits = tuple(int(d) for d in digits)
        if any(d < 0 or d > 3 for d in self.digits):
            raise ValueError(f"z-id digits must be in 0..3, got {self.digits}")

    @classmethod
    def from_prefix(cls, prefix: int, depth: int, base_depth: int) -> "ZId":
        n = depth - base_depth
        return cls(((prefix >> (2 * (n - 1 - i))) & 3) for i in range(n))

    def __str__(self) -> str:
        return ".".join(str(d) for d in self.digits)

    def __repr__(self) -> str:
        return f"ZId({str(self)!r})"

    def __eq__(self, other) -> bool:
        if isinstance(other, str):
            other = ZId(other)
        return isinstance(other, ZId) and self.digits == other.digits

    def __lt__(self, other: "ZId") -> bool:
        return self.digits < other.digits

    def __hash__(self) -> int:
        return hash(self.digits)

    def __len__(self) -> int:
        return len(self.digits)

    def is_prefix_of(self, other: "ZId") -> bool:
        return other.digits[:len(self.digits)] == self.digits


@dataclass(frozen=True)
class EntryKey:
    """One stored entry: user row, its point indices and its z-ids."""

    entry: int
    user_id: Hashable
    row: int
    point_index: tuple[int, ...]
    start: ZId
    end: ZId
    middle: tuple[ZId, ...] = ()

    @property
    def zkey(self) -> tuple:
        return (self.start, self.end) + self.middle


@dataclass(frozen=True)
class ZNode:
    entries: tuple[EntryKey, ...]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class _Parts:
    """Local partition tree of one point role (start, end or middle)."""

    depth: np.ndarray
    prefix: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    skip: np.ndarray
    leaf: np.ndarray

    @classmethod
    def empty(cls) -> "_Parts":
        e = np.zeros(0, np.int64)
        return cls(e, np.zeros(0, np.uint64), e, e, e, np.zeros(0, bool))

    def __len__(self) -> int:
        return self.depth.shape[0]


@dataclass
class _ZData:
    start: _Parts
    end: _Parts
    mid: _Parts
    sleaf: np.ndarray      # per UL position: start partition (local)
    eleaf: np.ndarray      # per UL position: end partition (local)
    mleaf: np.ndarray      # per middle point, in UL/point order
    moff: np.ndarray       # UL position -> offset into mleaf


class QNode:
    """One quadtree cell; ``entries`` holds entry ids in z-order."""

    __slots__ = ("tree", "depth", "prefix", "children", "entries", "zdata", "own", "s_ub", "index")

    def __init__(self, tree: "TQTree", depth: int, prefix: int):
        self.tree = tree
        self.depth = depth
        self.prefix = prefix
        self.children: list[QNode] | None = None
        self.entries = np.zeros(0, np.int64)
        self.zdata: _ZData | None = None
        self.own = 0
        self.s_ub = 0
        self.index = -1

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def ix(self) -> int:
        return int(K.deinterleave(np.array([self.prefix], np.uint64))[0][0])

    @property
    def iy(self) -> int:
        return int(K.deinterleave(np.array([self.prefix], np.uint64))[1][0])

    @property
    def cell(self) -> Rect:
        x0, y0, x1, y1 = K.cell_rects(np.array([self.depth]), np.array([self.prefix], np.uint64),
                                      self.tree.bounds.as_tuple())
        return Rect(float(x0[0]), float(y0[0]), float(x1[0]), float(y1[0]))

    def __len__(self) -> int:
        return int(self.entries.shape[0])

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else "internal"
        return f"QNode(depth={self.depth}, {kind}, entries={len(self)}, s_ub={self.s_ub})"

    def walk(self):
        """Preorder traversal of the subtree."""
        stack = [self]
        while stack:
            n = stack.pop()
            yield n
            if n.children is not None:
                stack.extend(reversed(n.children))

    def entry_keys(self) -> list[EntryKey]:
        return [self.tree.entry_key(self, i) for i in range(len(self))]

    def znodes(self) -> list[ZNode]:
        keys = self.entry_keys()
        b = self.tree.beta
        return [ZNode(tuple(keys[i:i + b])) for i in range(0, len(keys), b)]

    @property
    def user_ids(self) -> list[Hashable]:
        t = self.tree
        return [t.table.ids[int(t.e_user[e])] for e in self.entries]


@dataclass
class FlatTree:
    """Array layout of a tree consumed by the numeric kernels."""

    nodes: list
    n_depth: np.ndarray
    n_prefix: np.ndarray
    n_child: np.ndarray
    n_ul: np.ndarray
    n_parts: np.ndarray
    n_sub: np.ndarray
    n_own: np.ndarray
    b_entry: np.ndarray
    b_poff: np.ndarray
    b_user: np.ndarray
    b_px: np.ndarray
    b_py: np.ndarray
    b_pidx: np.ndarray
    b_pleaf: np.ndarray
    u_n: np.ndarray
    p_depth: np.ndarray
    p_prefix: np.ndarray
    p_skip: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    n_parent: np.ndarray


def bounds_for(users: Sequence[UserTrajectory], pad: float = 0.0) -> Rect:
    """Bounding box of all user points grown by ``pad`` (never degenerate)."""
    if not users:
        return Rect(-1.0, -1.0, 1.0, 1.0)
    pts = np.concatenate([u.points for u in users])
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    x0, y0, x1, y1 = x0 - pad, y0 - pad, x1 + pad, y1 + pad
    if x1 - x0 <= 0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 <= 0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    return Rect(float(x0), float(y0), float(x1), float(y1))


def _entry_bounds(mode: ServiceMode, variant: Variant, n: np.ndarray, k: np.ndarray,
                  first: np.ndarray, last: np.ndarray, elen: np.ndarray, ulen: np.ndarray,
                  nseg: np.ndarray) -> np.ndarray:
    """Integer upper bound of one entry's contribution to its user's score."""
    if mode is ServiceMode.BINARY:
        if variant is Variant.SEGMENTED:
            return np.where((first == 0) | (last == n - 1), SCALE, 0).astype(np.int64)
        return np.full(n.shape[0], SCALE, np.int64)
    if mode is ServiceMode.POINT_COUNT:
        frac = k / n
    else:
        safe = np.where(ulen > 0, ulen, 1.0)
        frac = np.where(ulen > 0, elen / safe, nseg / np.maximum(n - 1, 1))
    b = np.ceil(frac * SCALE) + 2
    return np.minimum(b, SCALE).astype(np.int64)


class TQTree:
    """Quadtree of q-nodes with z-ordered trajectory lists.

    Use :meth:`build` to construct one. The tree is fixed to the mode it was
    built for because node bounds are expressed in that mode's score units.
    """

    def __init__(self, beta: int, variant: Variant, bounds: Rect, mode: ServiceMode):
        if int(beta) < 1:
            raise ValueError("beta must be at least 1")
        self.beta = int(beta)
        self.variant = Variant(variant)
        self.bounds = bounds
        self.mode = ServiceMode(mode)
        self.table = UserTable([])
        self.g_x = np.zeros(0)
        self.g_y = np.zeros(0)
        self.g_code = np.zeros(0, np.uint64)
        self.g_pidx = np.zeros(0, np.int64)
        self.u_off = np.zeros(1, np.int64)
        self.e_user = np.zeros(0, np.int64)
        self.e_poff = np.zeros(1, np.int64)
        self.e_pts = np.zeros(0, np.int64)
        self.e_lca = np.zeros(0, np.int64)
        self.e_bound = np.zeros(0, np.int64)
        self.root = QNode(self, 0, 0)
        self._flat: FlatTree | None = None

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def build(cls, users: Sequence[UserTrajectory], beta: int = 64,
              variant: Variant | str = Variant.TWO_POINT, bounds: Rect | None = None,
              mode: ServiceMode | str = ServiceMode.BINARY) -> "TQTree":
        variant = Variant(variant)
        mode = ServiceMode(mode)
        if bounds is None:
            bounds = bounds_for(users)
        tree = cls(beta, variant, bounds, mode)
        tree._add_users(users)
        all_e = np.arange(tree.e_user.shape[0], dtype=np.int64)
        tree.root = tree._build_subtree(all_e, 0, 0)
        return tree

    def _check_user(self, u: UserTrajectory) -> None:
        if self.variant is Variant.TWO_POINT and self.mode is not ServiceMode.BINARY and len(u) > 2:
            raise ValueError(f"user trajectory {u.id!r} has {len(u)} points; the two-point variant "
                             "only indexes endpoints, which is exact for binary service only")
        b = self.bounds
        p = u.points
        if (p[:, 0].min() < b.x0 or p[:, 0].max() > b.x1 or p[:, 1].min() < b.y0
                or p[:, 1].max() > b.y1):
            raise ValueError(f"user trajectory {u.id!r} has points outside the index bounds {b}")

    def _add_users(self, users: Sequence[UserTrajectory]) -> np.ndarray:
        """Register users and their entries; returns the new entry ids."""
        users = list(users)
        for u in users:
            self._check_user(u)
        rows0 = len(self.table)
        for u in users:
            self.table.append(u)
        if not users:
            return np.zeros(0, np.int64)
        lens = np.array([len(u) for u in users], np.int64)
        pts = np.concatenate([u.points for u in users])
        p0 = self.g_x.shape[0]
        codes = K.morton_codes(pts[:, 0], pts[:, 1], self.bounds.as_tuple())
        u_start = p0 + np.concatenate([[0], np.cumsum(lens)[:-1]])
        pidx = np.arange(pts.shape[0]) - np.repeat(u_start - p0, lens)
        self.g_x = np.concatenate([self.g_x, pts[:, 0]])
        self.g_y = np.concatenate([self.g_y, pts[:, 1]])
        self.g_code = np.concatenate([self.g_code, codes])
        self.g_pidx = np.concatenate([self.g_pidx, pidx.astype(np.int64)])
        self.u_off = np.concatenate([self.u_off, p0 + np.cumsum(lens)])
        rows = np.arange(rows0, rows0 + len(users), dtype=np.int64)

        v = self.variant
        if v is Variant.TWO_POINT:
            e_user = rows
            e_cnt = np.full(len(users), 2, np.int64)
            e_pts = np.empty(2 * len(users), np.int64)
            e_pts[0::2] = u_start
            e_pts[1::2] = u_start + lens - 1
        elif v is Variant.SEGMENTED:
            e_user = np.repeat(rows, lens - 1)
            e_cnt = np.full(e_user.shape[0], 2, np.int64)
            first = np.concatenate([np.arange(s, s + n - 1) for s, n in zip(u_start, lens)])
            e_pts = np.empty(2 * first.shape[0], np.int64)
            e_pts[0::2] = first
            e_pts[1::2] = first + 1
        else:
            e_user = rows
            e_cnt = lens
            e_pts = np.arange(p0, p0 + pts.shape[0], dtype=np.int64)
        e_off = np.concatenate([[0], np.cumsum(e_cnt)]).astype(np.int64)

        c = self.g_code[e_pts]
        fc = c[e_off[:-1]]
        spread = np.bitwise_or.reduceat(c ^ np.repeat(fc, e_cnt), e_off[:-1])
        lca = np.minimum((64 - K.bit_length_u64(spread)) // 2, MAX_DEPTH)

        n = lens[e_user - rows0].astype(np.float64)
        first_idx = self.g_pidx[e_pts[e_off[:-1]]]
        last_idx = self.g_pidx[e_pts[e_off[1:] - 1]]
        seg = [self.table.seglens[r] for r in range(rows0, rows0 + len(users))]
        ulen = np.array([self.table.length[r] for r in range(rows0, rows0 + len(users))])[e_user - rows0]
        if v is Variant.FULL or v is Variant.TWO_POINT:
            elen = ulen
            nseg = n - 1
        else:
            elen = np.concatenate(seg) if seg else np.zeros(0)
            nseg = np.ones(e_user.shape[0])
        bnd = _entry_bounds(self.mode, v, n, e_cnt.astype(np.float64), first_idx, last_idx,
                            elen, ulen, nseg)

        e0 = self.e_user.shape[0]
        self.e_user = np.concatenate([self.e_user, e_user]).astype(np.int64)
        self.e_poff = np.concatenate([self.e_poff, self.e_poff[-1] + e_off[1:]]).astype(np.int64)
        self.e_pts = np.concatenate([self.e_pts, e_pts]).astype(np.int64)
        self.e_lca = np.concatenate([self.e_lca, lca]).astype(np.int64)
        self.e_bound = np.concatenate([self.e_bound, bnd]).astype(np.int64)
        self._flat = None
        return np.arange(e0, self.e_user.shape[0], dtype=np.int64)

    def _first_codes(self, entries: np.ndarray) -> np.ndarray:
        return self.g_code[self.e_pts[self.e_poff[entries]]]

    def _build_subtree(self, entries: np.ndarray, depth: int, prefix: int) -> QNode:
        fc = self._first_codes(entries)
        order = np.lexsort((entries, fc))
        return self._build_sorted(entries[order], fc[order], self.e_lca[entries[order]], depth, prefix)

    def _build_sorted(self, ents, fc, lca, depth, prefix) -> QNode:
        node = QNode(self, depth, prefix)
        if ents.shape[0] <= self.beta or depth >= MAX_DEPTH:
            self._set_entries(node, ents)
            node.s_ub = node.own
            return node
        stay = lca == depth
        self._set_entries(node, ents[stay])
        move = ~stay
        ents, fc, lca = ents[move], fc[move], lca[move]
        dig = K.digit_at(fc, depth)
        cut = np.searchsorted(dig, np.arange(5, dtype=np.uint64), side="left")
        node.children = []
        for q in range(4):
            a, b = int(cut[q]), int(cut[q + 1])
            node.children.append(self._build_sorted(ents[a:b], fc[a:b], lca[a:b], depth + 1,
                                                    (prefix << 2) | q))
        node.s_ub = node.own + sum(c.s_ub for c in node.children)
        return node

    def _set_entries(self, node: QNode, ents: np.ndarray) -> None:
        node.entries = np.asarray(ents, np.int64)
        node.own = int(self.e_bound[node.entries].sum()) if node.entries.shape[0] else 0
        assign_zids(node)
        self._flat = None

    # ------------------------------------------------------------------
    # updates

    def insert(self, u: UserTrajectory) -> None:
        """Add one user trajectory, splitting overflowing leaves.

        The resulting tree equals a fresh build over the same users in the
        same order.
        """
        if u.id in self.table.row_of:
            raise ValueError(f"duplicate user trajectory id {u.id!r}")
        self._check_user(u)
        new = self._add_users([u])
        touched: dict[int, tuple[QNode, list[QNode]]] = {}
        for e in new.tolist():
            code = int(self.g_code[self.e_pts[self.e_poff[e]]])
            lca = int(self.e_lca[e])
            node = self.root
            path = [node]
            while node.children is not None and lca != node.depth:
                node = node.children[(code >> (62 - 2 * node.depth)) & 3]
                path.append(node)
            bound = int(self.e_bound[e])
            for p in path:
                p.s_ub += bound
            node.own += bound
            node.entries = np.append(node.entries, e)
            touched[id(node)] = (node, path)
        for node, path in touched.values():
            if node.children is None and len(node) > self.beta and node.depth < MAX_DEPTH:
                fresh = self._build_subtree(node.entries, node.depth, node.prefix)
                node.children = fresh.children
                node.entries = fresh.entries
                node.zdata = fresh.zdata
                node.own = fresh.own
                for n in node.walk():
                    n.tree = self
            else:
                node.own = int(self.e_bound[node.entries].sum())
                assign_zids(node)
        self._flat = None

    # ------------------------------------------------------------------
    # queries on structure

    def nodes(self) -> list[QNode]:
        return list(self.root.walk())

    def __len__(self) -> int:
        return len(self.table)

    @property
    def n_entries(self) -> int:
        return int(self.e_user.shape[0])

    def subtree_bound(self, node: QNode | None = None) -> float:
        """Upper bound on the service value of the subtree, as a score."""
        node = node or self.root
        return node.s_ub / SCALE

    def entry_key(self, node: QNode, pos: int) -> EntryKey:
        z = node.zdata
        e = int(node.entries[pos])
        row = int(self.e_user[e])
        pts = self.e_pts[self.e_poff[e]:self.e_poff[e + 1]]
        d0 = node.depth

        def zid(parts: _Parts, i: int) -> ZId:
            return ZId.from_prefix(int(parts.prefix[i]), int(parts.depth[i]), d0)

        mids = tuple(zid(z.mid, int(i)) for i in z.mleaf[z.moff[pos]:z.moff[pos + 1]])
        return EntryKey(e, self.table.ids[row], row, tuple(int(i) for i in self.g_pidx[pts]),
                        zid(z.start, int(z.sleaf[pos])), zid(z.end, int(z.eleaf[pos])), mids)

    def find_user(self, uid: Hashable) -> list[QNode]:
        """Nodes holding an entry of user ``uid``."""
        row = self.table.row_of[uid]
        return [n for n in self.root.walk() if (self.e_user[n.entries] == row).any()]

    def stats(self) -> dict:
        nodes = self.nodes()
        leaves = [n for n in nodes if n.is_leaf]
        return {
            "users": len(self.table),
            "entries": self.n_entries,
            "nodes": len(nodes),
            "leaves": len(leaves),
            "max_depth": max(n.depth for n in nodes),
            "max_ul": max(len(n) for n in nodes),
            "root_ul": len(self.root),
            "s_ub_root": self.root.s_ub / SCALE,
            "beta": self.beta,
            "variant": self.variant.value,
            "mode": self.mode.value,
        }

    # ------------------------------------------------------------------
    # flat layout

    def flat(self) -> FlatTree:
        if self._flat is None:
            self._flat = self._flatten()
        return self._flat

    def _flatten(self) -> FlatTree:
        nodes = self.nodes()
        for i, n in enumerate(nodes):
            n.index = i
        N = len(nodes)
        n_depth = np.array([n.depth for n in nodes], np.int64)
        n_prefix = np.array([n.prefix for n in nodes], np.uint64)
        n_child = np.full((N, 4), -1, np.int64)
        n_parent = np.full(N, -1, np.int64)
        n_ul = np.zeros((N, 2), np.int64)
        n_parts = np.zeros((N, 6), np.int64)
        n_sub = np.array([n.s_ub for n in nodes], np.int64)
        n_own = np.array([n.own for n in nodes], np.int64)
        ents, pd, pp, ps, plo, phi = [], [], [], [], [], []
        sleaf_g, eleaf_g, mleaf_g = [], [], []
        e_at = 0
        p_at = 0
        for i, n in enumerate(nodes):
            if n.children is not None:
                for q, c in enumerate(n.children):
                    n_child[i, q] = c.index
                    n_parent[c.index] = i
            m = len(n)
            n_ul[i] = (e_at, e_at + m)
            z = n.zdata
            offs = []
            for parts, shift_lo in ((z.start, e_at), (z.end, 0), (z.mid, 0)):
                k = len(parts)
                offs.append((p_at, p_at + k))
                pd.append(parts.depth)
                pp.append(parts.prefix)
                ps.append(parts.skip + p_at)
                plo.append(parts.lo + shift_lo)
                phi.append(parts.hi + shift_lo)
                p_at += k
            n_parts[i] = (offs[0][0], offs[0][1], offs[1][0], offs[1][1], offs[2][0], offs[2][1])
            ents.append(n.entries)
            sleaf_g.append(z.sleaf + offs[0][0])
            eleaf_g.append(z.eleaf + offs[1][0])
            mleaf_g.append(z.mleaf + offs[2][0])
            e_at += m

        def cat(xs, dt):
            return np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)

        b_entry = cat(ents, np.int64)
        cnt = self.e_poff[b_entry + 1] - self.e_poff[b_entry]
        b_poff = np.concatenate([[0], np.cumsum(cnt)]).astype(np.int64)
        gidx = _gather_ranges(self.e_poff, self.e_pts, b_entry)
        b_pleaf = np.empty(gidx.shape[0], np.int64)
        if gidx.shape[0]:
            b_pleaf[b_poff[:-1]] = cat(sleaf_g, np.int64)
            b_pleaf[b_poff[1:] - 1] = cat(eleaf_g, np.int64)
            if self.variant is Variant.FULL:
                mid = np.ones(gidx.shape[0], bool)
                mid[b_poff[:-1]] = False
                mid[b_poff[1:] - 1] = False
                b_pleaf[mid] = cat(mleaf_g, np.int64)
        u_n = np.diff(self.u_off).astype(np.int64)
        return FlatTree(
            nodes=nodes, n_depth=n_depth, n_prefix=n_prefix, n_child=n_child, n_ul=n_ul,
            n_parts=n_parts, n_sub=n_sub, n_own=n_own, b_entry=b_entry, b_poff=b_poff,
            b_user=self.e_user[b_entry].astype(np.int64),
            b_px=np.ascontiguousarray(self.g_x[gidx]), b_py=np.ascontiguousarray(self.g_y[gidx]),
            b_pidx=self.g_pidx[gidx].astype(np.int64), b_pleaf=b_pleaf, u_n=u_n,
            p_depth=cat(pd, np.int64), p_prefix=cat(pp, np.uint64), p_skip=cat(ps, np.int64),
            p_lo=cat(plo, np.int64), p_hi=cat(phi, np.int64), n_parent=n_parent)

    # ------------------------------------------------------------------
    # validation

    def check_invariants(self) -> list[str]:
        """Recount every structural invariant; returns violation messages."""
        bad: list[str] = []
        nodes = self.nodes()
        total = sum(len(n) for n in nodes)
        expect = self.n_entries
        want = (len(self.table) if self.variant is not Variant.SEGMENTED
                else sum(n - 1 for n in self.table.n))
        if total != expect or total != want:
            bad.append(f"storage: {total} stored entries, expected {want}")
        seen = np.concatenate([n.entries for n in nodes]) if nodes else np.zeros(0, np.int64)
        if np.unique(seen).shape[0] != seen.shape[0]:
            bad.append("storage: an entry is stored more than once")
        for n in nodes:
            own = int(self.e_bound[n.entries].sum()) if len(n) else 0
            sub = own + (sum(c.s_ub for c in n.children) if n.children else 0)
            if own != n.own or sub != n.s_ub:
                bad.append(f"s_ub: node depth={n.depth} prefix={n.prefix} stores {n.s_ub}, recount {sub}")
            bad.extend(self._check_placement(n))
            bad.extend(self._check_zorder(n))
        return bad

    def _check_placement(self, n: QNode) -> list[str]:
        out = []
        d = n.depth
        for e in n.entries.tolist():
            codes = self.g_code[self.e_pts[self.e_poff[e]:self.e_poff[e + 1]]]
            if d and np.any((codes >> np.uint64(64 - 2 * d)) != np.uint64(n.prefix)):
                out.append(f"placement: entry {e} has points outside node cell at depth {d}")
                continue
            if n.children is not None:
                digs = np.unique(K.digit_at(codes, d))
                if digs.shape[0] < 2:
                    out.append(f"placement: entry {e} at internal node lies in one child")
            elif len(n) > self.beta and d < MAX_DEPTH:
                out.append(f"placement: leaf at depth {d} holds {len(n)} > beta entries")
                break
        return out

    def _check_zorder(self, n: QNode) -> list[str]:
        if not len(n):
            return []
        keys = [(k.start, k.end, k.middle, k.entry) for k in n.entry_keys()]
        if keys != sorted(keys):
            return [f"z-order: node depth={n.depth} list is not sorted by z-ids"]
        z = n.zdata
        for parts, name in ((z.start, "start"), (z.end, "end")):
            sizes = np.bincount(z.sleaf if name == "start" else z.eleaf, minlength=len(parts))
            over = (sizes > self.beta) & parts.leaf & (parts.depth < K.MAX_DIGITS)
            if over.any():
                return [f"z-order: {name} partition over capacity at node depth={n.depth}"]
        if n.zdata.end.depth.shape[0]:
            pairs = set(zip(z.sleaf.tolist(), z.eleaf.tolist()))
            full = z.end.depth[z.eleaf] < K.MAX_DIGITS
            if len(pairs) < len(n) and full.all():
                return [f"z-order: entries share start and end z-ids at node depth={n.depth}"]
        return []

    # ------------------------------------------------------------------
    # snapshot

    def dumps(self) -> str:
        buf = io.StringIO()
        self.save(buf)
        return buf.getvalue()

    def save(self, fp) -> None:
        """Versioned line-delimited JSON; floats are written as exact reprs."""
        if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
            with open(fp, "w", encoding="utf-8", newline="\n") as f:
                self.save(f)
            return
        b = self.bounds
        nodes = self.nodes()
        head = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION,
                "bounds": [b.x0, b.y0, b.x1, b.y1], "beta": self.beta,
                "variant": self.variant.value, "mode": self.mode.value,
                "users": len(self.table), "nodes": len(nodes)}
        w = fp.write
        w(json.dumps(head, sort_keys=True) + "\n")
        for u in self.table.users:
            w(json.dumps({"id": u.id, "points": u.points.tolist()}) + "\n")
        for n in nodes:
            rec = {"depth": n.depth, "prefix": n.prefix, "leaf": n.is_leaf, "s_ub": n.s_ub,
                   "entries": [[k.row, k.point_index[0], str(k.start), str(k.end),
                                [str(m) for m in k.middle]] for k in n.entry_keys()]}
            w(json.dumps(rec) + "\n")

    @classmethod
    def loads(cls, text: str) -> "TQTree":
        return cls.load(io.StringIO(text))

    @classmethod
    def load(cls, fp) -> "TQTree":
        if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
            with open(fp, encoding="utf-8") as f:
                return cls.load(f)
        lines = iter(fp)
        head = json.loads(next(lines))
        if head.get("format") != SNAPSHOT_FORMAT:
            raise ValueError("not a TQ-tree snapshot")
        if head.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {head.get('version')}")
        tree = cls(head["beta"], Variant(head["variant"]), Rect(*head["bounds"]),
                   ServiceMode(head["mode"]))
        users = []
        for _ in range(head["users"]):
            rec = json.loads(next(lines))
            users.append(UserTrajectory(rec["id"], rec["points"]))
        tree._add_users(users)
        first = tree.g_pidx[tree.e_pts[tree.e_poff[:-1]]]
        by_key = {(int(r), int(p)): e for e, (r, p) in enumerate(zip(tree.e_user, first))}
        recs = [json.loads(next(lines)) for _ in range(head["nodes"])]
        pos = 0

        def make() -> QNode:
            nonlocal pos
            rec = recs[pos]
            pos += 1
            node = QNode(tree, rec["depth"], rec["prefix"])
            ents = np.array([by_key[(r, p)] for r, p, *_ in rec["entries"]], np.int64)
            tree._set_entries(node, ents)
            got = [[k.row, k.point_index[0], str(k.start), str(k.end), [str(m) for m in k.middle]]
                   for k in node.entry_keys()]
            if got != rec["entries"]:
                raise ValueError(f"snapshot node {pos - 1}: stored z-ids disagree with the entries")
            if not rec["leaf"]:
                node.children = [make() for _ in range(4)]
            node.s_ub = node.own + (sum(c.s_ub for c in node.children) if node.children else 0)
            if node.s_ub != rec["s_ub"]:
                raise ValueError(f"snapshot node {pos - 1}: stored s_ub {rec['s_ub']} != {node.s_ub}")
            return node

        tree.root = make()
        if pos != len(recs):
            raise ValueError("snapshot has trailing nodes")
        return tree


def _gather_ranges(off: np.ndarray, data: np.ndarray, which: np.ndarray) -> np.ndarray:
    """Concatenate ``data[off[i]:off[i+1]]`` for ``i`` in ``which``."""
    if which.shape[0] == 0:
        return np.zeros(0, np.int64)
    a = off[which]
    cnt = off[which + 1] - a
    base = np.repeat(a - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
    return data[np.arange(cnt.sum()) + base]


def _parts(codes, d0, beta, labels=None):
    depth, prefix, lo, hi, skip, leaf, leaf_of = K.partition(codes, d0, beta, labels)
    return _Parts(depth, prefix, lo, hi, skip, leaf), leaf_of


def assign_zids(node: QNode) -> None:
    """Z-order the node's entries and record their start/end/middle z-ids.

    Start points are split into partitions of at most ``beta`` points. End
    points are split until each partition holds at most ``beta`` points and
    no two entries with the same start z-id share an end partition. Entries
    are then sorted by start z-id, end z-id and the z-ids of any middle
    points.
    """
    t = node.tree
    ents = node.entries
    m = ents.shape[0]
    d0 = node.depth
    if m == 0:
        node.zdata = _ZData(_Parts.empty(), _Parts.empty(), _Parts.empty(), np.zeros(0, np.int64),
                            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(1, np.int64))
        return
    a = t.e_poff[ents]
    b = t.e_poff[ents + 1]
    fc = t.g_code[t.e_pts[a]]
    lc = t.g_code[t.e_pts[b - 1]]
    order = np.lexsort((ents, fc))
    ents, fc, lc, a, b = ents[order], fc[order], lc[order], a[order], b[order]
    start, sleaf = _parts(fc, d0, t.beta)
    eorder = np.lexsort((sleaf, lc))
    end, eleaf_sorted = _parts(lc[eorder], d0, t.beta, labels=sleaf[eorder])
    eleaf = np.empty(m, np.int64)
    eleaf[eorder] = eleaf_sorted

    nmid = np.maximum(b - a - 2, 0)
    if t.variant is Variant.FULL and nmid.sum():
        mid_pts = np.concatenate([t.e_pts[x + 1:y - 1] for x, y in zip(a, b)])
        mc = t.g_code[mid_pts]
        morder = np.argsort(mc, kind="stable")
        mid, ml_sorted = _parts(mc[morder], d0, t.beta)
        mleaf = np.empty(mc.shape[0], np.int64)
        mleaf[morder] = ml_sorted
    else:
        mid = _Parts.empty()
        mleaf = np.zeros(0, np.int64)
    moff = np.concatenate([[0], np.cumsum(nmid)]).astype(np.int64)

    if mleaf.shape[0]:
        keys = [(int(sleaf[i]), int(eleaf[i]), tuple(mleaf[moff[i]:moff[i + 1]].tolist()), int(ents[i]))
                for i in range(m)]
        final = np.array(sorted(range(m), key=keys.__getitem__), np.int64)
    else:
        final = np.lexsort((ents, eleaf, sleaf))
    new_moff = np.concatenate([[0], np.cumsum(nmid[final])]).astype(np.int64)
    if mleaf.shape[0]:
        mleaf = np.concatenate([mleaf[moff[i]:moff[i + 1]] for i in final])
    node.entries = ents[final]
    node.zdata = _ZData(start, end, mid, sleaf[final], eleaf[final], mleaf, new_moff)

"""Numeric inner loops.

Every kernel has two implementations: a numba ``@njit`` version and a plain
numpy/Python version with identical results. The numba path is used when
numba imports cleanly and ``TQTREE_NO_NUMBA`` is unset (or ``0``). Set
``TQTREE_NO_NUMBA=1`` to force the fallback, e.g. when debugging or when
comparing both paths with ``benchmarks/bench_kernels.py``.

Morton codes use 32 bits per axis interleaved into a ``uint64``; quadrant
digit ``d`` at level ``t`` (0 = coarsest) is ``(code >> (62 - 2t)) & 3`` with
bit 0 = high x half and bit 1 = high y half.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_disabled() -> bool:
    return os.environ.get("TQTREE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = _HAVE_NUMBA and not _env_disabled()

MAX_DIGITS = 32
_GRID = float(1 << 32)

_M32 = np.uint64(0xFFFFFFFF)
_B = (
    np.uint64(0x0000FFFF0000FFFF),
    np.uint64(0x00FF00FF00FF00FF),
    np.uint64(0x0F0F0F0F0F0F0F0F),
    np.uint64(0x3333333333333333),
    np.uint64(0x5555555555555555),
)
_S = (np.uint64(16), np.uint64(8), np.uint64(4), np.uint64(2), np.uint64(1))


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Morton codes


def _spread_np(v):
    v = v & _M32
    v = (v | (v << _S[0])) & _B[0]
    v = (v | (v << _S[1])) & _B[1]
    v = (v | (v << _S[2])) & _B[2]
    v = (v | (v << _S[3])) & _B[3]
    v = (v | (v << _S[4])) & _B[4]
    return v


def _compact_np(v):
    v = v & _B[4]
    v = (v | (v >> _S[4])) & _B[3]
    v = (v | (v >> _S[3])) & _B[2]
    v = (v | (v >> _S[2])) & _B[1]
    v = (v | (v >> _S[1])) & _B[0]
    v = (v | (v >> _S[0])) & _M32
    return v


@njit(cache=True)
def _compact1(v):
    v = v & np.uint64(0x5555555555555555)
    v = (v | (v >> np.uint64(1))) & np.uint64(0x3333333333333333)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    return v


def grid_coords(x, y, bounds):
    """Quantize coordinates to the 2**32 grid of ``bounds`` (x0, y0, x1, y1)."""
    x0, y0, x1, y1 = bounds
    w = x1 - x0
    h = y1 - y0
    gx = np.floor((np.asarray(x, dtype=np.float64) - x0) * (_GRID / w))
    gy = np.floor((np.asarray(y, dtype=np.float64) - y0) * (_GRID / h))
    gx = np.clip(gx, 0.0, _GRID - 1.0).astype(np.uint64)
    gy = np.clip(gy, 0.0, _GRID - 1.0).astype(np.uint64)
    return gx, gy


def morton_codes(x, y, bounds) -> np.ndarray:
    gx, gy = grid_coords(x, y, bounds)
    return _spread_np(gx) | (_spread_np(gy) << np.uint64(1))


def deinterleave(prefix):
    """Split interleaved prefixes into (ix, iy) cell indices."""
    p = np.asarray(prefix, dtype=np.uint64)
    return _compact_np(p), _compact_np(p >> np.uint64(1))


def digit_at(codes, level: int):
    return (np.asarray(codes, dtype=np.uint64) >> np.uint64(62 - 2 * level)) & np.uint64(3)


def bit_length_u64(v) -> np.ndarray:
    """Vectorized ``int.bit_length`` for uint64 arrays."""
    v = np.asarray(v, dtype=np.uint64).copy()
    out = np.zeros(v.shape, dtype=np.int64)
    for shift in (32, 16, 8, 4, 2, 1):
        s = np.uint64(shift)
        hi = (v >> s) != 0
        out[hi] += shift
        v[hi] >>= s
    out += (v != 0).astype(np.int64)
    return out


# ---------------------------------------------------------------------------
# Point-in-range tests


@njit(cache=True)
def _served_mask_nb(px, py, sx, sy, psi2):
    n = px.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x = px[i]
        y = py[i]
        for j in range(sx.shape[0]):
            dx = x - sx[j]
            dy = y - sy[j]
            if dx * dx + dy * dy <= psi2:
                out[i] = True
                break
    return out


def _served_mask_np(px, py, sx, sy, psi2):
    n = px.shape[0]
    out = np.zeros(n, dtype=bool)
    if n == 0 or sx.shape[0] == 0:
        return out
    chunk = max(1, 1 << 20 // max(1, sx.shape[0]))
    for a in range(0, n, chunk):
        dx = px[a:a + chunk, None] - sx[None, :]
        dy = py[a:a + chunk, None] - sy[None, :]
        out[a:a + chunk] = ((dx * dx + dy * dy) <= psi2).any(axis=1)
    return out


def served_mask(px, py, sx, sy, psi2):
    """True where a point lies within sqrt(psi2) of any stop."""
    px = np.ascontiguousarray(px, dtype=np.float64)
    py = np.ascontiguousarray(py, dtype=np.float64)
    sx = np.ascontiguousarray(sx, dtype=np.float64)
    sy = np.ascontiguousarray(sy, dtype=np.float64)
    if USE_NUMBA:
        return _served_mask_nb(px, py, sx, sy, float(psi2))
    return _served_mask_np(px, py, sx, sy, float(psi2))


@njit(cache=True)
def _stops_near_rect_nb(sx, sy, x0, y0, x1, y1, lim2):
    out = np.zeros(sx.shape[0], dtype=np.bool_)
    for j in range(sx.shape[0]):
        dx = max(x0 - sx[j], 0.0, sx[j] - x1)
        dy = max(y0 - sy[j], 0.0, sy[j] - y1)
        out[j] = dx * dx + dy * dy <= lim2
    return out


def _stops_near_rect_np(sx, sy, x0, y0, x1, y1, lim2):
    dx = np.maximum(np.maximum(x0 - sx, 0.0), sx - x1)
    dy = np.maximum(np.maximum(y0 - sy, 0.0), sy - y1)
    return dx * dx + dy * dy <= lim2


def stops_near_rect(sx, sy, rect, lim2):
    x0, y0, x1, y1 = rect
    if USE_NUMBA:
        return _stops_near_rect_nb(sx, sy, float(x0), float(y0), float(x1), float(y1), float(lim2))
    return _stops_near_rect_np(sx, sy, x0, y0, x1, y1, lim2)


# ---------------------------------------------------------------------------
# Quadrant partitioning of sorted Morton codes
#
# Output is a preorder list of nonempty partitions. ``skip[i]`` is the index
# just past partition i's subtree, so a pruned descent jumps with i = skip[i].


@njit(cache=True)
def _partition_nb(codes, labels, n_labels, d0, beta, maxdepth):
    n = codes.shape[0]
    cap = 2 * n + 16
    p_depth = np.empty(cap, np.int64)
    p_prefix = np.empty(cap, np.uint64)
    p_lo = np.empty(cap, np.int64)
    p_hi = np.empty(cap, np.int64)
    p_parent = np.empty(cap, np.int64)
    p_leaf = np.empty(cap, np.bool_)
    leaf_of = np.full(n, -1, np.int64)
    mark = np.full(max(n_labels, 1), -1, np.int64)
    scap = 4 * (maxdepth + 2) + 8
    s_lo = np.empty(scap, np.int64)
    s_hi = np.empty(scap, np.int64)
    s_d = np.empty(scap, np.int64)
    s_par = np.empty(scap, np.int64)
    sp = 0
    count = 0
    if n == 0:
        return (p_depth[:0], p_prefix[:0], p_lo[:0], p_hi[:0], np.empty(0, np.int64),
                p_leaf[:0], leaf_of)
    s_lo[0] = 0
    s_hi[0] = n
    s_d[0] = d0
    s_par[0] = -1
    sp = 1
    while sp > 0:
        sp -= 1
        lo = s_lo[sp]
        hi = s_hi[sp]
        d = s_d[sp]
        par = s_par[sp]
        if count == cap:
            cap2 = cap * 2
            a = np.empty(cap2, np.int64)
            a[:cap] = p_depth
            p_depth = a
            b = np.empty(cap2, np.uint64)
            b[:cap] = p_prefix
            p_prefix = b
            a = np.empty(cap2, np.int64)
            a[:cap] = p_lo
            p_lo = a
            a = np.empty(cap2, np.int64)
            a[:cap] = p_hi
            p_hi = a
            a = np.empty(cap2, np.int64)
            a[:cap] = p_parent
            p_parent = a
            c = np.empty(cap2, np.bool_)
            c[:cap] = p_leaf
            p_leaf = c
            cap = cap2
        idx = count
        count += 1
        p_depth[idx] = d
        if d == 0:
            p_prefix[idx] = np.uint64(0)
        else:
            p_prefix[idx] = codes[lo] >> np.uint64(64 - 2 * d)
        p_lo[idx] = lo
        p_hi[idx] = hi
        p_parent[idx] = par
        split = False
        if d < maxdepth:
            if hi - lo > beta:
                split = True
            elif n_labels > 0:
                for i in range(lo, hi):
                    lab = labels[i]
                    if mark[lab] == idx:
                        split = True
                        break
                    mark[lab] = idx
        if not split:
            p_leaf[idx] = True
            for i in range(lo, hi):
                leaf_of[i] = idx
            continue
        p_leaf[idx] = False
        shift = np.uint64(62 - 2 * d)
        # boundaries of the four digit runs
        b1 = lo
        while b1 < hi and ((codes[b1] >> shift) & np.uint64(3)) < 1:
            b1 += 1
        b2 = b1
        while b2 < hi and ((codes[b2] >> shift) & np.uint64(3)) < 2:
            b2 += 1
        b3 = b2
        while b3 < hi and ((codes[b3] >> shift) & np.uint64(3)) < 3:
            b3 += 1
        bnd0 = lo
        bnd1 = b1
        bnd2 = b2
        bnd3 = b3
        bnd4 = hi
        # push in reverse so digit 0 is emitted first
        if bnd4 > bnd3:
            s_lo[sp] = bnd3
            s_hi[sp] = bnd4
            s_d[sp] = d + 1
            s_par[sp] = idx
            sp += 1
        if bnd3 > bnd2:
            s_lo[sp] = bnd2
            s_hi[sp] = bnd3
            s_d[sp] = d + 1
            s_par[sp] = idx
            sp += 1
        if bnd2 > bnd1:
            s_lo[sp] = bnd1
            s_hi[sp] = bnd2
            s_d[sp] = d + 1
            s_par[sp] = idx
            sp += 1
        if bnd1 > bnd0:
            s_lo[sp] = bnd0
            s_hi[sp] = bnd1
            s_d[sp] = d + 1
            s_par[sp] = idx
            sp += 1
    size = np.ones(count, np.int64)
    for i in range(count - 1, 0, -1):
        size[p_parent[i]] += size[i]
    skip = np.empty(count, np.int64)
    for i in range(count):
        skip[i] = i + size[i]
    return (p_depth[:count].copy(), p_prefix[:count].copy(), p_lo[:count].copy(),
            p_hi[:count].copy(), skip, p_leaf[:count].copy(), leaf_of)


def _partition_py(codes, labels, n_labels, d0, beta, maxdepth):
    n = codes.shape[0]
    leaf_of = np.full(n, -1, np.int64)
    depth, prefix, lo_l, hi_l, parent, leaf = [], [], [], [], [], []
    if n == 0:
        e = np.empty(0, np.int64)
        return e, np.empty(0, np.uint64), e, e, e, np.empty(0, bool), leaf_of
    stack = [(0, n, d0, -1)]
    while stack:
        lo, hi, d, par = stack.pop()
        idx = len(depth)
        depth.append(d)
        prefix.append(int(codes[lo]) >> (64 - 2 * d) if d else 0)
        lo_l.append(lo)
        hi_l.append(hi)
        parent.append(par)
        split = False
        if d < maxdepth:
            if hi - lo > beta:
                split = True
            elif n_labels > 0:
                seg = labels[lo:hi]
                split = np.unique(seg).shape[0] < seg.shape[0]
        leaf.append(not split)
        if not split:
            leaf_of[lo:hi] = idx
            continue
        dig = digit_at(codes[lo:hi], d)
        bnd = lo + np.searchsorted(dig, np.arange(5, dtype=np.uint64), side="left")
        bnd[4] = hi
        for k in (3, 2, 1, 0):
            if bnd[k + 1] > bnd[k]:
                stack.append((int(bnd[k]), int(bnd[k + 1]), d + 1, idx))
    count = len(depth)
    parent_a = np.asarray(parent, np.int64)
    size = np.ones(count, np.int64)
    for i in range(count - 1, 0, -1):
        size[parent_a[i]] += size[i]
    skip = np.arange(count, dtype=np.int64) + size
    return (np.asarray(depth, np.int64), np.asarray(prefix, np.uint64),
            np.asarray(lo_l, np.int64), np.asarray(hi_l, np.int64), skip,
            np.asarray(leaf, bool), leaf_of)


def partition(codes, d0, beta, labels=None, maxdepth=MAX_DIGITS):
    """Recursively split sorted ``codes`` into quadrants below level ``d0``.

    A partition is split while it holds more than ``beta`` codes or, when
    ``labels`` is given, while two of its codes share a label. Splitting stops
    at ``maxdepth`` digits (coincident codes).

    Returns ``(depth, prefix, lo, hi, skip, is_leaf, leaf_of)``.
    """
    codes = np.ascontiguousarray(codes, dtype=np.uint64)
    if labels is None:
        lab = np.zeros(0, np.int64)
        n_labels = 0
    else:
        lab = np.ascontiguousarray(labels, dtype=np.int64)
        n_labels = int(lab.max()) + 1 if lab.shape[0] else 0
    if USE_NUMBA:
        return _partition_nb(codes, lab, n_labels, int(d0), int(beta), int(maxdepth))
    return _partition_py(codes, lab, n_labels, int(d0), int(beta), int(maxdepth))


# ---------------------------------------------------------------------------
# Coverage of a partition list by a set of stops


@njit(cache=True)
def _cover_nb(p_depth, p_prefix, p_skip, bx0, by0, bw, bh, sx, sy, lim2, k0, k1):
    cov = np.zeros(k1 - k0, dtype=np.bool_)
    i = k0
    while i < k1:
        d = p_depth[i]
        pre = p_prefix[i]
        ix = _compact1(pre)
        iy = _compact1(pre >> np.uint64(1))
        scale = 1.0 / (2.0 ** d)
        cw = bw * scale
        ch = bh * scale
        x0 = bx0 + float(ix) * cw
        y0 = by0 + float(iy) * ch
        x1 = x0 + cw
        y1 = y0 + ch
        hit = False
        for j in range(sx.shape[0]):
            dx = max(x0 - sx[j], 0.0, sx[j] - x1)
            dy = max(y0 - sy[j], 0.0, sy[j] - y1)
            if dx * dx + dy * dy <= lim2:
                hit = True
                break
        if hit:
            cov[i - k0] = True
            i += 1
        else:
            i = p_skip[i]
    return cov


def cell_rects(depth, prefix, bounds):
    """Float rectangles (x0, y0, x1, y1) of grid cells given by depth/prefix."""
    bx0, by0, bx1, by1 = bounds
    ix, iy = deinterleave(prefix)
    scale = 1.0 / np.exp2(np.asarray(depth, dtype=np.float64))
    cw = (bx1 - bx0) * scale
    ch = (by1 - by0) * scale
    x0 = bx0 + ix.astype(np.float64) * cw
    y0 = by0 + iy.astype(np.float64) * ch
    return x0, y0, x0 + cw, y0 + ch


def _cover_np(p_depth, p_prefix, bounds, sx, sy, lim2):
    # A child cell lies inside its parent, so a covered child always has a
    # covered parent; testing every partition equals the pruned descent.
    k = p_depth.shape[0]
    if k == 0 or sx.shape[0] == 0:
        return np.zeros(k, dtype=bool)
    x0, y0, x1, y1 = cell_rects(p_depth, p_prefix, bounds)
    dx = np.maximum(np.maximum(x0[:, None] - sx[None, :], 0.0), sx[None, :] - x1[:, None])
    dy = np.maximum(np.maximum(y0[:, None] - sy[None, :], 0.0), sy[None, :] - y1[:, None])
    return ((dx * dx + dy * dy) <= lim2).any(axis=1)


def cover(p_depth, p_prefix, p_skip, bounds, sx, sy, lim2, k0=0, k1=None):
    """Flags partitions ``k0:k1`` whose cell lies within ``sqrt(lim2)`` of a stop.

    ``p_skip`` holds absolute indices, so ``k0:k1`` must be one whole tree.
    """
    if k1 is None:
        k1 = p_depth.shape[0]
    if USE_NUMBA:
        bx0, by0, bx1, by1 = bounds
        return _cover_nb(p_depth, p_prefix, p_skip, float(bx0), float(by0),
                         float(bx1 - bx0), float(by1 - by0), sx, sy, float(lim2),
                         int(k0), int(k1))
    return _cover_np(p_depth[k0:k1], p_prefix[k0:k1], bounds, sx, sy, lim2)


# ---------------------------------------------------------------------------
# Batched evaluation of <q-node, facility component> pairs
#
# Flat tree layout (see ``tree.FlatTree``):
#   node arrays  n_depth, n_prefix, n_child (N, 4), n_ul (N, 2),
#                n_parts (N, 6) = start/end/mid partition ranges, n_sub
#   entries      b_poff (E + 1), b_user (E)
#   entry points b_px, b_py, b_pidx (index within the user), b_pleaf
#   partitions   p_depth, p_prefix, p_skip, p_lo, p_hi
#
# Modes: 0 binary, 1 point count, 2 length.

BINARY, POINT_COUNT, LENGTH = 0, 1, 2


@njit(cache=True)
def _entry_emits(b_poff, b_pidx, u_n, e, user, flags, f0, mode, need_all):
    a = b_poff[e]
    b = b_poff[e + 1]
    if need_all:
        for q in range(a, b):
            if not flags[f0 + q - a]:
                return False
        return True
    if mode == 1:
        for q in range(a, b):
            if flags[f0 + q - a]:
                return True
        return False
    if mode == 0:
        last = u_n[user] - 1
        for q in range(a, b):
            if flags[f0 + q - a] and (b_pidx[q] == 0 or b_pidx[q] == last):
                return True
        return False
    for q in range(a, b - 1):
        if flags[f0 + q - a] and flags[f0 + q + 1 - a] and b_pidx[q + 1] == b_pidx[q] + 1:
            return True
    return False


@njit(cache=True)
def _relax_nb(pr_node, pr_soff, pr_sidx, pr_desc, fsx, fsy,
              n_depth, n_prefix, n_child, n_ul, n_parts, n_sub,
              b_poff, b_user, b_px, b_py, b_pidx, b_pleaf, u_n,
              p_depth, p_prefix, p_skip, p_lo, p_hi,
              bx0, by0, bw, bh, psi2, lim2, mode, and_mode, need_all, use_z, exact):
    npairs = pr_node.shape[0]
    # output capacity
    tot_e = 0
    tot_p = 0
    tot_s = 0
    for p in range(npairs):
        nd = pr_node[p]
        lo = n_ul[nd, 0]
        hi = n_ul[nd, 1]
        tot_e += hi - lo
        tot_p += b_poff[hi] - b_poff[lo]
        tot_s += pr_soff[p + 1] - pr_soff[p]
    em_pos = np.empty(tot_e, np.int64)
    em_foff = np.empty(tot_e + 1, np.int64)
    em_flags = np.empty(tot_p, np.bool_)
    ch_node = np.empty(4 * npairs, np.int64)
    ch_soff = np.empty(4 * npairs + 1, np.int64)
    ch_sidx = np.empty(4 * tot_s, np.int64)
    ne = 0
    nf = 0
    nc = 0
    ns = 0
    hsum = 0
    em_foff[0] = 0
    ch_soff[0] = 0
    cand = np.zeros(0, np.int64)
    for p in range(npairs):
        nd = pr_node[p]
        s0 = pr_soff[p]
        s1 = pr_soff[p + 1]
        k = s1 - s0
        sx = np.empty(k, np.float64)
        sy = np.empty(k, np.float64)
        for j in range(k):
            sx[j] = fsx[pr_sidx[s0 + j]]
            sy[j] = fsy[pr_sidx[s0 + j]]
        lo = n_ul[nd, 0]
        hi = n_ul[nd, 1]
        if hi > lo and k > 0:
            m = hi - lo
            if cand.shape[0] < m:
                cand = np.empty(m, np.int64)
            ncand = 0
            if not use_z:
                for e in range(lo, hi):
                    cand[ncand] = e
                    ncand += 1
            else:
                ps0 = n_parts[nd, 0]
                ps1 = n_parts[nd, 1]
                pe0 = n_parts[nd, 2]
                pe1 = n_parts[nd, 3]
                pm0 = n_parts[nd, 4]
                pm1 = n_parts[nd, 5]
                cs = _cover_nb(p_depth, p_prefix, p_skip, bx0, by0, bw, bh, sx, sy, lim2, ps0, ps1)
                ce = _cover_nb(p_depth, p_prefix, p_skip, bx0, by0, bw, bh, sx, sy, lim2, pe0, pe1)
                if and_mode:
                    # only entries under covered start partitions are visited
                    i = ps0
                    while i < ps1:
                        if not cs[i - ps0]:
                            i = p_skip[i]
                            continue
                        if p_skip[i] == i + 1:
                            for e in range(p_lo[i], p_hi[i]):
                                if ce[b_pleaf[b_poff[e + 1] - 1] - pe0]:
                                    cand[ncand] = e
                                    ncand += 1
                        i += 1
                else:
                    cm = _cover_nb(p_depth, p_prefix, p_skip, bx0, by0, bw, bh, sx, sy, lim2, pm0, pm1)
                    for e in range(lo, hi):
                        a = b_poff[e]
                        b = b_poff[e + 1]
                        hit = cs[b_pleaf[a] - ps0] or ce[b_pleaf[b - 1] - pe0]
                        q = a + 1
                        while not hit and q < b - 1:
                            hit = cm[b_pleaf[q] - pm0]
                            q += 1
                        if hit:
                            cand[ncand] = e
                            ncand += 1
            for c in range(ncand):
                e = cand[c]
                a = b_poff[e]
                b = b_poff[e + 1]
                if not exact:
                    em_pos[ne] = e
                    for q in range(a, b):
                        em_flags[nf + q - a] = False
                    nf += b - a
                    ne += 1
                    em_foff[ne] = nf
                    continue
                for q in range(a, b):
                    x = b_px[q]
                    y = b_py[q]
                    hit = False
                    for j in range(k):
                        dx = x - sx[j]
                        dy = y - sy[j]
                        if dx * dx + dy * dy <= psi2:
                            hit = True
                            break
                    em_flags[nf + q - a] = hit
                if _entry_emits(b_poff, b_pidx, u_n, e, b_user[e], em_flags, nf, mode, need_all):
                    em_pos[ne] = e
                    nf += b - a
                    ne += 1
                    em_foff[ne] = nf
        if pr_desc[p] and n_child[nd, 0] >= 0 and k > 0:
            for c in range(4):
                ch = n_child[nd, c]
                d = n_depth[ch]
                pre = n_prefix[ch]
                ix = _compact1(pre)
                iy = _compact1(pre >> np.uint64(1))
                scale = 1.0 / (2.0 ** d)
                cw = bw * scale
                chh = bh * scale
                x0 = bx0 + float(ix) * cw
                y0 = by0 + float(iy) * chh
                x1 = x0 + cw
                y1 = y0 + chh
                start = ns
                for j in range(k):
                    dx = max(x0 - sx[j], 0.0, sx[j] - x1)
                    dy = max(y0 - sy[j], 0.0, sy[j] - y1)
                    if dx * dx + dy * dy <= lim2:
                        ch_sidx[ns] = pr_sidx[s0 + j]
                        ns += 1
                if ns > start:
                    ch_node[nc] = ch
                    nc += 1
                    ch_soff[nc] = ns
                    hsum += n_sub[ch]
    return (em_pos[:ne], em_foff[:ne + 1], em_flags[:nf],
            ch_node[:nc], ch_soff[:nc + 1], ch_sidx[:ns], hsum)


def _relax_py(pr_node, pr_soff, pr_sidx, pr_desc, fsx, fsy,
              n_depth, n_prefix, n_child, n_ul, n_parts, n_sub,
              b_poff, b_user, b_px, b_py, b_pidx, b_pleaf, u_n,
              p_depth, p_prefix, p_skip, p_lo, p_hi,
              bx0, by0, bw, bh, psi2, lim2, mode, and_mode, need_all, use_z, exact):
    bounds = (bx0, by0, bx0 + bw, by0 + bh)
    em_pos, em_flags = [], []
    ch_node, ch_sidx, ch_len = [], [], []
    hsum = 0
    for p in range(pr_node.shape[0]):
        nd = int(pr_node[p])
        sidx = pr_sidx[pr_soff[p]:pr_soff[p + 1]]
        sx = fsx[sidx]
        sy = fsy[sidx]
        lo, hi = int(n_ul[nd, 0]), int(n_ul[nd, 1])
        if hi > lo and sidx.shape[0]:
            ents = np.arange(lo, hi)
            starts = b_poff[lo:hi]
            ends = b_poff[lo + 1:hi + 1]
            if use_z:
                ps0, ps1, pe0, pe1, pm0, pm1 = (int(v) for v in n_parts[nd])
                cs = _cover_np(p_depth[ps0:ps1], p_prefix[ps0:ps1], bounds, sx, sy, lim2)
                ce = _cover_np(p_depth[pe0:pe1], p_prefix[pe0:pe1], bounds, sx, sy, lim2)
                s_ok = cs[b_pleaf[starts] - ps0]
                e_ok = ce[b_pleaf[ends - 1] - pe0]
                if and_mode:
                    keep = s_ok & e_ok
                else:
                    cm = _cover_np(p_depth[pm0:pm1], p_prefix[pm0:pm1], bounds, sx, sy, lim2)
                    keep = s_ok | e_ok
                    for i in np.flatnonzero(~keep):
                        a, b = int(starts[i]), int(ends[i])
                        if b - a > 2 and cm[b_pleaf[a + 1:b - 1] - pm0].any():
                            keep[i] = True
                ents = ents[keep]
            for e in ents:
                a, b = int(b_poff[e]), int(b_poff[e + 1])
                if not exact:
                    em_pos.append(e)
                    em_flags.append(np.zeros(b - a, bool))
                    continue
                fl = _served_mask_np(b_px[a:b], b_py[a:b], sx, sy, psi2)
                pidx = b_pidx[a:b]
                if need_all:
                    ok = bool(fl.all())
                elif mode == POINT_COUNT:
                    ok = bool(fl.any())
                elif mode == BINARY:
                    last = u_n[b_user[e]] - 1
                    ok = bool((fl & ((pidx == 0) | (pidx == last))).any())
                else:
                    ok = bool((fl[:-1] & fl[1:] & (pidx[1:] == pidx[:-1] + 1)).any())
                if ok:
                    em_pos.append(e)
                    em_flags.append(fl)
        if pr_desc[p] and n_child[nd, 0] >= 0 and sidx.shape[0]:
            for c in range(4):
                ch = int(n_child[nd, c])
                x0, y0, x1, y1 = cell_rects(n_depth[ch:ch + 1], n_prefix[ch:ch + 1], bounds)
                near = _stops_near_rect_np(sx, sy, x0[0], y0[0], x1[0], y1[0], lim2)
                if near.any():
                    ch_node.append(ch)
                    ch_sidx.append(sidx[near])
                    ch_len.append(int(near.sum()))
                    hsum += int(n_sub[ch])
    em_foff = np.zeros(len(em_pos) + 1, np.int64)
    if em_flags:
        em_foff[1:] = np.cumsum([f.shape[0] for f in em_flags])
    ch_soff = np.zeros(len(ch_node) + 1, np.int64)
    if ch_len:
        ch_soff[1:] = np.cumsum(ch_len)
    return (np.asarray(em_pos, np.int64), em_foff,
            np.concatenate(em_flags) if em_flags else np.zeros(0, bool),
            np.asarray(ch_node, np.int64), ch_soff,
            np.concatenate(ch_sidx).astype(np.int64) if ch_sidx else np.zeros(0, np.int64),
            hsum)


def relax_pairs(*args):
    """Evaluate node lists and split components for a batch of pairs.

    Returns ``(em_pos, em_foff, em_flags, ch_node, ch_soff, ch_sidx, hsum)``:
    emitted entry positions with per-point served flags, then the child pairs
    (node, stop-index lists) and the sum of their subtree bounds.
    """
    if USE_NUMBA:
        return _relax_nb(*args)
    return _relax_py(*args)


# ---------------------------------------------------------------------------
# Circular range query over a point partition tree


@njit(cache=True)
def _range_nb(p_depth, p_prefix, p_skip, p_lo, p_hi, bx0, by0, bw, bh,
              px, py, cx, cy, psi2, lim2, out):
    k = p_depth.shape[0]
    n = 0
    i = 0
    while i < k:
        d = p_depth[i]
        pre = p_prefix[i]
        ix = _compact1(pre)
        iy = _compact1(pre >> np.uint64(1))
        scale = 1.0 / (2.0 ** d)
        cw = bw * scale
        ch = bh * scale
        x0 = bx0 + float(ix) * cw
        y0 = by0 + float(iy) * ch
        dx = max(x0 - cx, 0.0, cx - (x0 + cw))
        dy = max(y0 - cy, 0.0, cy - (y0 + ch))
        if dx * dx + dy * dy > lim2:
            i = p_skip[i]
            continue
        if p_skip[i] == i + 1:
            for q in range(p_lo[i], p_hi[i]):
                ex = px[q] - cx
                ey = py[q] - cy
                if ex * ex + ey * ey <= psi2:
                    out[n] = q
                    n += 1
        i += 1
    return n


def _range_np(p_depth, p_prefix, p_skip, p_lo, p_hi, bounds, px, py, cx, cy, psi2, lim2):
    leaf = p_skip == np.arange(p_skip.shape[0]) + 1
    cov = _cover_np(p_depth, p_prefix, bounds, np.array([cx]), np.array([cy]), lim2) & leaf
    if not cov.any():
        return np.zeros(0, np.int64)
    cand = np.concatenate([np.arange(a, b) for a, b in zip(p_lo[cov], p_hi[cov])])
    dx = px[cand] - cx
    dy = py[cand] - cy
    return cand[dx * dx + dy * dy <= psi2].astype(np.int64)


def range_query(p_depth, p_prefix, p_skip, p_lo, p_hi, bounds, px, py, cx, cy, psi2, lim2, buf):
    """Sorted-point positions within sqrt(psi2) of (cx, cy)."""
    if USE_NUMBA:
        bx0, by0, bx1, by1 = bounds
        n = _range_nb(p_depth, p_prefix, p_skip, p_lo, p_hi, float(bx0), float(by0),
                      float(bx1 - bx0), float(by1 - by0), px, py, float(cx), float(cy),
                      float(psi2), float(lim2), buf)
        return buf[:n].copy()
    return _range_np(p_depth, p_prefix, p_skip, p_lo, p_hi, bounds, px, py, cx, cy, psi2, lim2)

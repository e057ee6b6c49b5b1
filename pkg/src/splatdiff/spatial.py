"""Exact k-nearest-neighbour search over 3D point sets.

The compiled path is a median-split kd-tree with bounding-box pruning; the
numpy path is a blocked brute force. Both return neighbours ordered by
(squared distance, point index), so ties resolve to the lower index and the
two backends agree bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit, prange
from .model import PointCloud, SplatError

LEAF_SIZE = 16
_STACK = 128


@njit
def _select(pts, dim, perm, lo, hi, kth):
    # Wirth/Hoare selection on perm[lo:hi] keyed by pts[:, dim]
    while hi - lo > 1:
        a = pts[perm[lo], dim]
        b = pts[perm[(lo + hi - 1) // 2], dim]
        c = pts[perm[hi - 1], dim]
        if a > b:
            a, b = b, a
        if b > c:
            b = c
        pivot = a if a > b else b
        i = lo
        j = hi - 1
        while i <= j:
            while pts[perm[i], dim] < pivot:
                i += 1
            while pts[perm[j], dim] > pivot:
                j -= 1
            if i <= j:
                t = perm[i]
                perm[i] = perm[j]
                perm[j] = t
                i += 1
                j -= 1
        if kth <= j:
            hi = j + 1
        elif kth >= i:
            lo = i
        else:
            return


@njit
def _build(pts, leaf_size):
    n = pts.shape[0]
    perm = np.arange(n)
    cap = 2 * (n // max(1, (leaf_size + 1) // 2) + 1) + 1
    node_lo = np.empty(cap, np.int64)
    node_hi = np.empty(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    bbox = np.empty((cap, 6))
    stack = np.empty(cap, np.int64)
    node_lo[0] = 0
    node_hi[0] = n
    count = 1
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lo = node_lo[node]
        hi = node_hi[node]
        for ax in range(3):
            bbox[node, ax] = np.inf
            bbox[node, 3 + ax] = -np.inf
        for s in range(lo, hi):
            j = perm[s]
            for ax in range(3):
                v = pts[j, ax]
                if v < bbox[node, ax]:
                    bbox[node, ax] = v
                if v > bbox[node, 3 + ax]:
                    bbox[node, 3 + ax] = v
        if hi - lo <= leaf_size:
            continue
        dim = 0
        ext = bbox[node, 3] - bbox[node, 0]
        for ax in range(1, 3):
            e = bbox[node, 3 + ax] - bbox[node, ax]
            if e > ext:
                ext = e
                dim = ax
        if ext <= 0.0:
            continue  # all coincident: keep as an oversized leaf
        mid = (lo + hi) // 2
        _select(pts, dim, perm, lo, hi, mid)
        lc = count
        rc = count + 1
        count += 2
        node_lo[lc] = lo
        node_hi[lc] = mid
        node_lo[rc] = mid
        node_hi[rc] = hi
        left[node] = lc
        right[node] = rc
        stack[sp] = lc
        stack[sp + 1] = rc
        sp += 2
    return perm, node_lo[:count].copy(), node_hi[:count].copy(), left[:count].copy(), right[:count].copy(), bbox[:count].copy()


@njit
def _box_d2(bbox, node, qx, qy, qz):
    d = 0.0
    if qx < bbox[node, 0]:
        t = bbox[node, 0] - qx
        d += t * t
    elif qx > bbox[node, 3]:
        t = qx - bbox[node, 3]
        d += t * t
    if qy < bbox[node, 1]:
        t = bbox[node, 1] - qy
        d += t * t
    elif qy > bbox[node, 4]:
        t = qy - bbox[node, 4]
        d += t * t
    if qz < bbox[node, 2]:
        t = bbox[node, 2] - qz
        d += t * t
    elif qz > bbox[node, 5]:
        t = qz - bbox[node, 5]
        d += t * t
    return d


@njit
def _knn_one(tpts, perm, node_lo, node_hi, left, right, bbox, qx, qy, qz, k, bi, bd, st_node, st_lb):
    n = tpts.shape[0]
    for s in range(k):
        bd[s] = np.inf
        bi[s] = n
    st_node[0] = 0
    st_lb[0] = _box_d2(bbox, 0, qx, qy, qz)
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        # ties with the current worst must still be visited for the index tie-break
        if st_lb[sp] > bd[k - 1]:
            continue
        lc = left[node]
        if lc == -1:
            for s in range(node_lo[node], node_hi[node]):
                j = perm[s]
                dx = tpts[s, 0] - qx
                dy = tpts[s, 1] - qy
                dz = tpts[s, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                w = bd[k - 1]
                if d2 < w or (d2 == w and j < bi[k - 1]):
                    pos = k - 1
                    while pos > 0 and (bd[pos - 1] > d2 or (bd[pos - 1] == d2 and bi[pos - 1] > j)):
                        bd[pos] = bd[pos - 1]
                        bi[pos] = bi[pos - 1]
                        pos -= 1
                    bd[pos] = d2
                    bi[pos] = j
            continue
        rc = right[node]
        ll = _box_d2(bbox, lc, qx, qy, qz)
        lr = _box_d2(bbox, rc, qx, qy, qz)
        w = bd[k - 1]
        if ll <= lr:
            if lr <= w:
                st_node[sp] = rc
                st_lb[sp] = lr
                sp += 1
            if ll <= w:
                st_node[sp] = lc
                st_lb[sp] = ll
                sp += 1
        else:
            if ll <= w:
                st_node[sp] = lc
                st_lb[sp] = ll
                sp += 1
            if lr <= w:
                st_node[sp] = rc
                st_lb[sp] = lr
                sp += 1


@njit(parallel=True)
def _knn_tree(tpts, perm, node_lo, node_hi, left, right, bbox, queries, k, out_idx, out_d2):
    nq = queries.shape[0]
    for qi in prange(nq):
        st_node = np.empty(_STACK, np.int64)
        st_lb = np.empty(_STACK)
        _knn_one(
            tpts, perm, node_lo, node_hi, left, right, bbox,
            queries[qi, 0], queries[qi, 1], queries[qi, 2], k,
            out_idx[qi], out_d2[qi], st_node, st_lb,
        )


def _knn_brute(pts: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Blocked brute force with the same arithmetic and tie-break as the tree."""
    n = len(pts)
    nq = len(queries)
    out_idx = np.empty((nq, k), np.int64)
    out_d2 = np.empty((nq, k))
    block = max(1, (1 << 22) // max(n, 1))
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    for start in range(0, nq, block):
        q = queries[start:start + block]
        b = len(q)
        dx = px[None, :] - q[:, 0:1]
        dy = py[None, :] - q[:, 1:2]
        dz = pz[None, :] - q[:, 2:3]
        d2 = dx * dx + dy * dy + dz * dz
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        rows, cols = np.nonzero(d2 <= kth[:, None])
        vals = d2[rows, cols]
        order = np.lexsort((cols, vals, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        take = np.searchsorted(rows, np.arange(b))[:, None] + np.arange(k)
        out_idx[start:start + b] = cols[take]
        out_d2[start:start + b] = vals[take]
    return out_idx, out_d2


def _coherent_order(q: np.ndarray) -> np.ndarray:
    """Z-order permutation of query points; neighbouring queries then share cache lines."""
    if len(q) < 4096:
        return np.arange(len(q))
    lo = q.min(axis=0)
    span = np.maximum(q.max(axis=0) - lo, 1e-300)
    cells = np.minimum((q - lo) / span * 1024.0, 1023.0).astype(np.uint64)
    code = np.zeros(len(q), np.uint64)
    for bit in range(10):
        for ax in range(3):
            code |= ((cells[:, ax] >> np.uint64(bit)) & np.uint64(1)) << np.uint64(3 * bit + ax)
    return np.argsort(code, kind="stable")


class KdIndex:
    """Immutable exact kNN index. Safe to query from several threads."""

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        if isinstance(points, PointCloud):
            points = points.points
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise SplatError("cannot build a kNN index over an empty point set")
        if not np.all(np.isfinite(pts)):
            raise SplatError("kNN index points must be finite")
        pts.flags.writeable = False
        self.points = pts
        self.leaf_size = int(leaf_size)
        self._tree = None
        if _accel.use_numba():
            self._ensure_tree()

    def __len__(self) -> int:
        return len(self.points)

    def _ensure_tree(self):
        if self._tree is None:
            perm, lo, hi, left, right, bbox = _build(self.points, self.leaf_size)
            tpts = np.ascontiguousarray(self.points[perm])
            self._tree = (tpts, perm, lo, hi, left, right, bbox)
        return self._tree

    def query(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch query. Returns ``(indices, distances)``, each ``(Q, min(k, N))``."""
        if k < 1:
            raise SplatError("k must be >= 1")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(int(k), len(self.points))
        if len(q) == 0:
            return np.empty((0, k), np.int64), np.empty((0, k))
        if _accel.use_numba():
            tree = self._ensure_tree()
            order = _coherent_order(q)
            idx = np.empty((len(q), k), np.int64)
            d2 = np.empty((len(q), k))
            _knn_tree(*tree, q[order], k, idx, d2)
            inv = np.empty_like(order)
            inv[order] = np.arange(len(order))
            idx, d2 = idx[inv], d2[inv]
        else:
            idx, d2 = _knn_brute(self.points, q, k)
        return idx, np.sqrt(d2)

    def knn_query(self, query, k: int) -> list[tuple[int, float]]:
        idx, dist = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]

    def mean_knn_distance(self, queries, h: int) -> np.ndarray:
        """Mean distance to the ``min(h, N)`` nearest points, per query."""
        _, dist = self.query(queries, h)
        return dist.mean(axis=1)


def build_index(points) -> KdIndex:
    return KdIndex(points)


def knn_query(index: KdIndex, query, k: int) -> list[tuple[int, float]]:
    return index.knn_query(query, k)


def mean_knn_distance(index: KdIndex, query, h: int) -> float:
    if h < 1:
        raise SplatError("h must be >= 1")
    return float(index.mean_knn_distance(np.asarray(query).reshape(1, 3), h)[0])

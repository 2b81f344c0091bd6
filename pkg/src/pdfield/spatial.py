"""Exact radius / k-nearest queries over a static 3-D point set.

The tree is a median-split k-d tree with leaf buckets, stored as flat arrays.
Queries are answered for a whole batch at once: a frontier of
``(query, node)`` pairs is pushed down the tree level by level, pairs whose
node box lies farther than ``R`` are dropped, and surviving leaves are
scanned exhaustively. Results are exact (closed ball, ties broken by index).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray  # (k,) int64, ascending distance
    distances: np.ndarray  # (k,) float64

    def __len__(self) -> int:
        return len(self.indices)


class SpatialIndex:
    """Immutable median-split k-d tree over ``points`` (P, 3).

    Node arrays: ``lo``/``hi`` bounding boxes, ``left``/``right`` children
    (-1 at leaves) and, for leaves, a row of ``leaf_table`` listing the
    point indices in that bucket (padded with -1).
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (P, 3) points, got shape {pts.shape}")
        if len(pts) == 0:
            raise ValueError("cannot index an empty point cloud")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.points = pts
        self.points.setflags(write=False)
        self.leaf_size = leaf_size
        self._build()

    def __len__(self) -> int:
        return len(self.points)

    def _build(self) -> None:
        pts = self.points
        lo, hi, left, right, leaf_of = [], [], [], [], []
        leaves: list[np.ndarray] = []
        # explicit stack; children are allocated when their parent is split
        lo.append(pts.min(0)); hi.append(pts.max(0)); left.append(-1); right.append(-1); leaf_of.append(-1)
        stack = [(0, np.arange(len(pts)))]
        while stack:
            node, idx = stack.pop()
            if len(idx) <= self.leaf_size:
                leaf_of[node] = len(leaves)
                leaves.append(idx)
                continue
            span = hi[node] - lo[node]
            axis = int(np.argmax(span))
            if span[axis] == 0.0:  # all coincident: one oversized leaf
                leaf_of[node] = len(leaves)
                leaves.append(idx)
                continue
            mid = len(idx) // 2
            order = np.argpartition(pts[idx, axis], mid)
            halves = (idx[order[:mid]], idx[order[mid:]])
            kids = []
            for half in halves:
                kid = len(lo)
                sub = pts[half]
                lo.append(sub.min(0)); hi.append(sub.max(0)); left.append(-1); right.append(-1); leaf_of.append(-1)
                kids.append(kid)
                stack.append((kid, half))
            left[node], right[node] = kids
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.leaf_of = np.array(leaf_of, dtype=np.int64)
        width = max(len(b) for b in leaves)
        table = np.full((len(leaves), width), -1, dtype=np.int64)
        for i, b in enumerate(leaves):
            table[i, : len(b)] = np.sort(b)
        self.leaf_table = table

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_table)

    QUERY_BLOCK = 4096

    def _candidates(self, queries: np.ndarray, radius: float):
        """All (query, point, squared distance) with distance <= radius."""
        r2 = radius * radius
        q_ids = np.arange(len(queries))
        nodes = np.zeros(len(queries), dtype=np.int64)
        leaf_q, leaf_n = [], []
        while len(q_ids):
            qp = queries[q_ids]
            gap = np.maximum(self.lo[nodes] - qp, 0.0) + np.maximum(qp - self.hi[nodes], 0.0)
            keep = np.einsum("ij,ij->i", gap, gap) <= r2
            q_ids, nodes = q_ids[keep], nodes[keep]
            is_leaf = self.left[nodes] < 0
            leaf_q.append(q_ids[is_leaf])
            leaf_n.append(nodes[is_leaf])
            inner_q, inner_n = q_ids[~is_leaf], nodes[~is_leaf]
            q_ids = np.concatenate([inner_q, inner_q])
            nodes = np.concatenate([self.left[inner_n], self.right[inner_n]])
        lq = np.concatenate(leaf_q)
        rows = self.leaf_table[self.leaf_of[np.concatenate(leaf_n)]]  # (pairs, width)
        valid = rows >= 0
        cq = np.broadcast_to(lq[:, None], rows.shape)[valid]
        cp = rows[valid]
        diff = self.points[cp] - queries[cq]
        d2 = np.einsum("ij,ij->i", diff, diff)
        inside = d2 <= r2
        return cq[inside], cp[inside], d2[inside]

    def query_radius(self, queries, radius: float, k: int) -> tuple[np.ndarray, np.ndarray]:
        """The ``k`` nearest points within ``radius`` of each query.

        Returns ``(indices, distances)`` of shape (Q, k), sorted ascending by
        distance with ties broken by point index; missing slots hold index -1
        and distance ``inf``.
        """
        if not radius > 0:
            raise ValueError(f"radius must be positive, got {radius}")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        idx = np.full((len(q), k), -1, dtype=np.int64)
        dist = np.full((len(q), k), np.inf)
        if len(q) == 0:
            return idx, dist
        # blocks bound the candidate-pair arrays when the radius is large
        for s in range(0, len(q), self.QUERY_BLOCK):
            block = q[s: s + self.QUERY_BLOCK]
            cq, cp, d2 = self._candidates(block, radius)
            order = np.lexsort((cp, d2, cq))
            cq, cp, d2 = cq[order], cp[order], d2[order]
            starts = np.searchsorted(cq, cq, side="left")
            rank = np.arange(len(cq)) - starts
            sel = rank < k
            idx[s + cq[sel], rank[sel]] = cp[sel]
            dist[s + cq[sel], rank[sel]] = np.sqrt(d2[sel])
        return idx, dist

    def any_within(self, queries, radius: float) -> np.ndarray:
        """Boolean mask: does each query have at least one point within ``radius``."""
        idx, _ = self.query_radius(queries, radius, 1)
        return idx[:, 0] >= 0

    def query_knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact k nearest neighbours (no radius limit).

        Runs radius queries with a growing radius until every query has ``k``
        hits; the radius starts from the mean point spacing of the bounding box.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(k, len(self.points))
        idx = np.full((len(q), k), -1, dtype=np.int64)
        dist = np.full((len(q), k), np.inf)
        extent = float(np.max(self.hi[0] - self.lo[0]))
        radius = max(extent, 1e-12) * (k / len(self.points)) ** (1.0 / 3.0)
        todo = np.arange(len(q))
        while len(todo):
            i, d = self.query_radius(q[todo], radius, k)
            done = i[:, -1] >= 0
            idx[todo[done]] = i[done]
            dist[todo[done]] = d[done]
            todo = todo[~done]
            radius *= 2.0
        return idx, dist


def build_index(cloud, leaf_size: int = 16) -> SpatialIndex:
    return SpatialIndex(np.asarray(cloud), leaf_size)


def radius_neighbors(index: SpatialIndex, query, radius: float, k: int) -> NeighborSet:
    idx, dist = index.query_radius(np.asarray(query, dtype=np.float64).reshape(1, 3), radius, k)
    found = idx[0] >= 0
    return NeighborSet(idx[0][found], dist[0][found])


def prune_samples(index: SpatialIndex, samples, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Split sample positions into (retained, discarded) index arrays.

    A sample is retained iff some indexed point lies within ``radius``.
    """
    keep = index.any_within(samples, radius)
    return np.flatnonzero(keep), np.flatnonzero(~keep)


def mean_nn_spacing(points, index: SpatialIndex | None = None) -> float:
    """Mean distance from each point to its nearest *other* point."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("need at least two points to measure spacing")
    index = index or SpatialIndex(pts)
    _, dist = index.query_knn(pts, 2)
    return float(np.mean(dist[:, 1]))


def default_radius(points, factor: float = 2.0) -> float:
    """Retention/aggregation radius: ``factor`` x mean nearest-neighbour spacing."""
    return factor * mean_nn_spacing(points)

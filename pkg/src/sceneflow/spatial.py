"""Exact nearest-neighbour index and DBSCAN clustering."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GeometryError, check_points


class NeighborIndex:
    """Balanced KD-tree over a fixed cloud with deterministic tie-breaking.

    Nearest-neighbour ties (equal distance) resolve to the lowest point index.
    """

    def __init__(self, cloud, leafsize=16):
        cloud = check_points(cloud, name="cloud")
        if len(cloud) == 0:
            raise GeometryError("cannot index an empty cloud")
        self.points = cloud
        self.leafsize = leafsize
        self._tree = cKDTree(cloud, leafsize=leafsize, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Nearest indexed point for each query row: ``(indices, distances)``."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(2, len(self.points))
        dist, idx = self._tree.query(queries, k=k)
        if k == 1:
            return idx.astype(np.intp), dist
        best_d, best_i = dist[:, 0], idx[:, 0].astype(np.intp)
        tied = dist[:, 1] == dist[:, 0]
        for row in np.flatnonzero(tied):
            # every point at exactly the minimum distance
            cand = self._tree.query_ball_point(queries[row], r=best_d[row] * (1 + 1e-12) + 1e-300)
            cand = np.asarray(cand, dtype=np.intp)
            d = np.linalg.norm(self.points[cand] - queries[row], axis=1)
            cand = cand[d == d.min()]
            best_i[row] = cand.min()
            best_d[row] = d.min()
        return best_i, best_d

    def nearest(self, query):
        """Index of and distance to the globally nearest point."""
        idx, dist = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def radius_query(self, query, r):
        """Indices within distance ``r`` (closed ball), ascending."""
        if not r > 0:
            raise ValueError("radius must be positive")
        query = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(query, r=r * (1 + 1e-12)), dtype=np.intp)
        if len(cand):
            d = np.linalg.norm(self.points[cand] - query, axis=1)
            cand = cand[d <= r]
        return np.sort(cand)

    def radius_neighbors(self, r):
        """Closed-ball neighbourhoods of every indexed point, each ascending."""
        raw = self._tree.query_ball_point(self.points, r=r * (1 + 1e-12))
        out = []
        for i, cand in enumerate(raw):
            cand = np.asarray(cand, dtype=np.intp)
            d = np.linalg.norm(self.points[cand] - self.points[i], axis=1)
            out.append(np.sort(cand[d <= r]))
        return out


def build_index(cloud, leafsize=16):
    return NeighborIndex(cloud, leafsize=leafsize)


def nearest(index, query):
    return index.nearest(query)


def radius_query(index, query, r):
    return index.radius_query(query, r)


@dataclass(frozen=True)
class ClusterSet:
    labels: np.ndarray
    n_clusters: int

    def members(self, cluster_id):
        return np.flatnonzero(self.labels == cluster_id)


def dbscan(cloud, epsilon, min_points):
    """Density-based clustering with deterministic ascending-index expansion.

    Core points have at least ``min_points`` neighbours within ``epsilon``
    (the point itself counts).  A border point joins the first cluster that
    reaches it.  Unreached points are noise (label -1).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    cloud = check_points(cloud, name="cloud")
    n = len(cloud)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ClusterSet(labels, 0)
    neighbors = NeighborIndex(cloud).radius_neighbors(epsilon)
    is_core = np.array([len(nb) >= min_points for nb in neighbors])
    cluster = 0
    for start in range(n):
        if labels[start] != -1 or not is_core[start]:
            continue
        labels[start] = cluster
        queue = deque([start])
        while queue:
            p = queue.popleft()
            if not is_core[p]:
                continue
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    queue.append(q)
        cluster += 1
    return ClusterSet(labels, cluster)

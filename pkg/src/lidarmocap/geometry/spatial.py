"""Nearest-neighbour search over point sets and one-sided Chamfer distance."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class SpatialIndex:
    """Exact nearest-neighbour index over a fixed point set.

    Squared distances are recomputed from coordinates so they match a direct
    evaluation of ``sum((q - p) ** 2)``. Equidistant candidates resolve to the
    lowest point index.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indices (M,) and squared distances (M,) for queries (M, 3)."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            raise ValueError("nearest-neighbour query on an empty point set")
        k = min(2, len(self.points))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        cand = self.points[idx]
        d2 = np.sum((q[:, None, :] - cand) ** 2, axis=2)
        best = idx[:, 0].copy()
        best_d = d2[:, 0].copy()
        if k > 1:
            closer = d2[:, 1] < best_d
            best[closer] = idx[closer, 1]
            best_d[closer] = d2[closer, 1]
            ties = np.flatnonzero(d2[:, 1] == d2[:, 0])
            for i in ties:
                best[i], best_d[i] = self._resolve_tie(q[i], best_d[i])
        return best, best_d

    def _resolve_tie(self, q: np.ndarray, d2: float) -> tuple[int, float]:
        cand = np.asarray(self._tree.query_ball_point(q, np.sqrt(d2) * (1 + 1e-9) + 1e-300), dtype=np.int64)
        cd = np.sum((self.points[cand] - q) ** 2, axis=1)
        m = cd.min()
        i = int(cand[cd == m].min())
        return i, float(m)


def nearest(index: SpatialIndex, query: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Closest indexed point to a single query: (point, squared distance, index)."""
    idx, d2 = index.query(np.asarray(query, dtype=np.float64)[None])
    return index.points[idx[0]].copy(), float(d2[0]), int(idx[0])


def chamfer_one_sided(source: np.ndarray, target: np.ndarray | SpatialIndex) -> float:
    """Mean over ``source`` of the squared distance to the nearest target point.

    Empty source or target raises ``ValueError`` (the mean is undefined).
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    index = target if isinstance(target, SpatialIndex) else SpatialIndex(target)
    if len(source) == 0 or len(index) == 0:
        raise ValueError("chamfer distance of an empty point set is undefined")
    _, d2 = index.query(source)
    return float(d2.mean())

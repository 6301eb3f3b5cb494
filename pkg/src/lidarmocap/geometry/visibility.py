"""Visibility of a point set from a viewpoint by spherical flipping and a convex hull."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .raycast import LidarSpec

_RANK_TOL = 1e-10


def hidden_point_removal(points: np.ndarray, viewpoint: np.ndarray, radius_exponent: float = 2.0) -> np.ndarray:
    """Indices (sorted) of the points visible from ``viewpoint``.

    Each point is reflected through a sphere centred at the viewpoint whose
    radius is ``max ||p|| * 10**radius_exponent``; the points whose reflections
    lie on the convex hull of the reflections plus the viewpoint are visible.

    When the reflected set spans fewer than three dimensions the hull is taken
    in its affine span (so of two points collinear with the viewpoint only the
    nearer survives). A point coinciding with the viewpoint is always visible.
    If no hull can be formed at all, every point is reported visible.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    p = pts - np.asarray(viewpoint, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(p, axis=1)
    at_view = norm == 0.0
    if at_view.all():
        return np.arange(n)
    radius = norm.max() * 10.0 ** radius_exponent
    safe = np.where(at_view, 1.0, norm)
    flipped = p + 2.0 * (radius - safe)[:, None] * p / safe[:, None]
    flipped[at_view] = 0.0
    cloud = np.vstack([flipped, np.zeros((1, 3))])
    try:
        hull_idx = _hull_vertices(cloud)
    except (QhullError, ValueError):
        return np.arange(n)
    visible = np.zeros(n, dtype=bool)
    hull_idx = hull_idx[hull_idx < n]
    visible[hull_idx] = True
    visible[at_view] = True
    return np.flatnonzero(visible)


def _hull_vertices(cloud: np.ndarray) -> np.ndarray:
    centered = cloud - cloud.mean(0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = s[0] if s.size and s[0] > 0 else 1.0
    rank = int(np.sum(s > _RANK_TOL * scale))
    if rank == 3:
        return ConvexHull(cloud).vertices
    if rank == 2:
        return ConvexHull(centered @ vt[:2].T).vertices
    if rank == 1:
        t = centered @ vt[0]
        return np.unique([int(np.argmin(t)), int(np.argmax(t))])
    raise ValueError("degenerate point set")


def observable_vertices(vertices: np.ndarray, origin: np.ndarray, rotation: np.ndarray, sensor: LidarSpec,
                        radius_exponent: float = 2.0) -> np.ndarray:
    """Indices of body vertices the sensor could return.

    Vertices hidden from the sensor are removed, then those outside the
    vertical field of view or the range limits; among the rest at most one
    vertex (the closest) is kept per azimuth/elevation cell of the sensor grid.
    """
    vis = hidden_point_removal(vertices, origin, radius_exponent)
    if vis.size == 0:
        return vis
    local = (vertices[vis] - origin) @ rotation
    rng = np.linalg.norm(local, axis=1)
    el = np.degrees(np.arcsin(np.clip(local[:, 2] / np.maximum(rng, 1e-300), -1, 1)))
    az = np.degrees(np.arctan2(local[:, 1], local[:, 0]))
    ok = (el >= sensor.fov_down) & (el <= sensor.fov_up) & (rng >= sensor.min_range) & (rng <= sensor.max_range)
    vis, rng, el, az = vis[ok], rng[ok], el[ok], az[ok]
    if vis.size == 0:
        return vis
    # cell steps are in radians
    if sensor.n_beams > 1:
        row = np.rint(np.radians(el - sensor.fov_down) / sensor.elevation_step)
        row = np.clip(row, 0, sensor.n_beams - 1).astype(np.int64)
    else:
        row = np.zeros(el.shape, np.int64)
    col = np.rint(np.radians(az % 360.0) / sensor.azimuth_step).astype(np.int64) % sensor.n_columns
    cell = row * sensor.n_columns + col
    order = np.lexsort((vis, rng, cell))
    first = np.ones(order.size, bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    return np.sort(vis[order[first]])

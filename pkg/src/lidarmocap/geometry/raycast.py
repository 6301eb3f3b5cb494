"""Spinning multi-beam LiDAR model and ray casting against triangle meshes.

Sensor frame: X forward, Y left, Z up. Beam ``b`` has a fixed elevation and
column ``k`` the azimuth ``2*pi*k / n_columns`` measured from +X toward +Y.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numba as nb
import numpy as np


@dataclass(frozen=True)
class LidarSpec:
    """Beam layout and range limits of the sensor.

    Attributes:
        n_beams: number of vertical channels.
        fov_up, fov_down: elevation (degrees) of the top and bottom beams.
        n_columns: azimuth samples per revolution.
        min_range, max_range: accepted return distances in metres.
    """

    n_beams: int = 128
    fov_up: float = 22.5
    fov_down: float = -22.5
    n_columns: int = 1024
    min_range: float = 0.3
    max_range: float = 80.0

    def __post_init__(self) -> None:
        if self.n_beams < 1 or self.n_columns < 1:
            raise ValueError("beam and column counts must be positive")
        if not self.fov_down < self.fov_up and self.n_beams > 1:
            raise ValueError("fov_down must be below fov_up")
        if not 0 <= self.min_range < self.max_range:
            raise ValueError("invalid range limits")

    @property
    def elevations(self) -> np.ndarray:
        if self.n_beams == 1:
            return np.radians(np.array([self.fov_down]))
        return np.radians(np.linspace(self.fov_down, self.fov_up, self.n_beams))

    @property
    def azimuth_step(self) -> float:
        return 2 * np.pi / self.n_columns

    @property
    def elevation_step(self) -> float:
        if self.n_beams == 1:
            return 0.0
        return np.radians(self.fov_up - self.fov_down) / (self.n_beams - 1)

    def directions(self) -> np.ndarray:
        """Unit ray directions (n_beams, n_columns, 3) in the sensor frame."""
        el = self.elevations[:, None]
        az = self.azimuth_step * np.arange(self.n_columns)[None, :]
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                         np.sin(el) * np.ones_like(az)], axis=-1)


class RayHits(NamedTuple):
    """Returns of one scan. ``points`` are in the frame the mesh was given in."""

    points: np.ndarray
    faces: np.ndarray
    bary: np.ndarray
    ranges: np.ndarray
    ray_ids: np.ndarray


@nb.njit(cache=True)
def _cast(verts, faces, face_mask, elevations, n_cols, min_r, max_r, dirs):
    n_beams = elevations.shape[0]
    n_rays = n_beams * n_cols
    best_t = np.full(n_rays, np.inf)
    best_f = np.full(n_rays, -1, np.int64)
    best_u = np.zeros(n_rays)
    best_v = np.zeros(n_rays)
    az_step = 2 * np.pi / n_cols
    two_pi = 2 * np.pi
    for f in range(faces.shape[0]):
        if not face_mask[f]:
            continue
        a = verts[faces[f, 0]]
        b = verts[faces[f, 1]]
        c = verts[faces[f, 2]]
        # bounds of the face in (azimuth, elevation)
        zmin = min(a[2], b[2], c[2])
        zmax = max(a[2], b[2], c[2])
        ra = np.hypot(a[0], a[1])
        rb = np.hypot(b[0], b[1])
        rc = np.hypot(c[0], c[1])
        rmax = max(ra, rb, rc)
        # does the xy projection contain the vertical axis?
        s1 = a[0] * b[1] - a[1] * b[0]
        s2 = b[0] * c[1] - b[1] * c[0]
        s3 = c[0] * a[1] - c[1] * a[0]
        contains = (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0)
        if contains:
            rmin = 0.0
        else:
            rmin = rmax
            for e in range(3):
                p = verts[faces[f, e]]
                q = verts[faces[f, (e + 1) % 3]]
                dx, dy = q[0] - p[0], q[1] - p[1]
                l2 = dx * dx + dy * dy
                t = 0.0
                if l2 > 0:
                    t = min(1.0, max(0.0, -(p[0] * dx + p[1] * dy) / l2))
                rmin = min(rmin, np.hypot(p[0] + t * dx, p[1] + t * dy))
        el_lo = np.arctan2(zmin, rmin if zmin < 0 else rmax)
        el_hi = np.arctan2(zmax, rmax if zmax < 0 else rmin)
        if contains:
            k_lo = 0
            k_hi = n_cols - 1
        else:
            az0 = np.arctan2(a[1], a[0])
            az1 = np.arctan2(b[1], b[0])
            az2 = np.arctan2(c[1], c[0])
            az1 = az0 + (az1 - az0 + np.pi) % two_pi - np.pi
            az2 = az0 + (az2 - az0 + np.pi) % two_pi - np.pi
            lo = min(az0, az1, az2)
            hi = max(az0, az1, az2)
            k_lo = int(np.ceil(lo / az_step - 1e-9))
            k_hi = int(np.floor(hi / az_step + 1e-9))
            if k_hi - k_lo >= n_cols:
                k_lo = 0
                k_hi = n_cols - 1
        e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
        e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
        for bi in range(n_beams):
            el = elevations[bi]
            if el < el_lo - 1e-12 or el > el_hi + 1e-12:
                continue
            for kk in range(k_lo, k_hi + 1):
                k = kk % n_cols
                ray = bi * n_cols + k
                dx, dy, dz = dirs[bi, k, 0], dirs[bi, k, 1], dirs[bi, k, 2]
                # Moller-Trumbore
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < 1e-15:
                    continue
                inv = 1.0 / det
                tx, ty, tz = -a[0], -a[1], -a[2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t < min_r or t > max_r:
                    continue
                if t < best_t[ray] or (t == best_t[ray] and f < best_f[ray]):
                    best_t[ray] = t
                    best_f[ray] = f
                    best_u[ray] = u
                    best_v[ray] = v
    return best_t, best_f, best_u, best_v


def cast_rays(vertices: np.ndarray, faces: np.ndarray, origin: np.ndarray, rotation: np.ndarray,
              spec: LidarSpec, face_mask: np.ndarray | None = None) -> RayHits:
    """First returns of every ray of one scan against a mesh.

    Args:
        vertices, faces: mesh in some frame W.
        origin, rotation: sensor pose in W (sensor-to-W rotation).
        face_mask: optional boolean mask of faces that may be hit.

    Returns:
        Hits with points in W, sorted by ray id (beam-major).
    """
    rot = np.asarray(rotation, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    local = np.ascontiguousarray((np.asarray(vertices, float) - o) @ rot)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    mask = np.ones(len(faces), dtype=np.bool_) if face_mask is None else np.ascontiguousarray(face_mask, dtype=np.bool_)
    dirs = _directions(spec)
    t, f, u, v = _cast(local, faces, mask, spec.elevations, spec.n_columns,
                       float(spec.min_range), float(spec.max_range), dirs)
    hit = np.flatnonzero(f >= 0)
    d = dirs.reshape(-1, 3)[hit]
    pts_local = d * t[hit, None]
    bary = np.stack([1.0 - u[hit] - v[hit], u[hit], v[hit]], axis=1)
    return RayHits(pts_local @ rot.T + o, f[hit], bary, t[hit], hit)


_DIR_CACHE: dict[LidarSpec, np.ndarray] = {}


def _directions(spec: LidarSpec) -> np.ndarray:
    d = _DIR_CACHE.get(spec)
    if d is None:
        d = np.ascontiguousarray(spec.directions())
        _DIR_CACHE[spec] = d
    return d

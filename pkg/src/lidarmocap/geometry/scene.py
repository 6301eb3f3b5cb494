"""Static scene maps and per-frame point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import BVH, TriangleMesh, closest_points_on_mesh, face_normals
from .spatial import SpatialIndex


@dataclass(eq=False)
class PointCloudFrame:
    """Points of one scan with their timestamp and the frame they are expressed in.

    ``frame`` is a short tag: ``"S"`` sensor-local, ``"L"`` the sensor frame of
    scan 0 (map frame), ``"W"`` world.
    """

    points: np.ndarray
    timestamp: float = 0.0
    frame: str = "S"
    frame_id: int = 0

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]


def estimate_normals(points: np.ndarray, viewpoints: np.ndarray, k: int = 16) -> np.ndarray:
    """Unit normals of a point set from plane fits to each point's ``k`` nearest
    neighbours, each turned to face the nearest of ``viewpoints`` (for example
    the capture trajectory)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    views = np.asarray(viewpoints, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3 or len(views) == 0:
        raise ValueError("normal estimation needs at least three points and one viewpoint")
    _, nbr = cKDTree(pts).query(pts, k=min(k, len(pts)))
    local = pts[nbr] - pts[nbr].mean(1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", local, local))
    normals = vecs[:, :, 0]
    _, vi = cKDTree(views).query(pts)
    flip = np.einsum("ni,ni->n", normals, views[vi] - pts) < 0
    normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


@dataclass(eq=False)
class SceneMap:
    """Reconstructed environment as a mesh (preferred) or an oriented point set.

    ``ground_mask`` flags faces (mesh) or points (point set) that belong to the
    walkable ground.
    """

    vertices: np.ndarray | None = None
    faces: np.ndarray | None = None
    points: np.ndarray | None = None
    normals: np.ndarray | None = None
    ground_mask: np.ndarray | None = None
    frame: str = "W"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.vertices is not None:
            self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
            self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
            n = len(self.faces)
        elif self.points is not None:
            self.points = np.ascontiguousarray(self.points, dtype=np.float64)
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            n = len(self.points)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match the points")
            if n and np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("scene normals must have unit length")
        else:
            raise ValueError("scene needs either a mesh or an oriented point set")
        self.ground_mask = np.zeros(n, bool) if self.ground_mask is None else np.asarray(self.ground_mask, bool)
        if self.ground_mask.shape != (n,):
            raise ValueError("ground mask does not match the element count")

    @property
    def is_mesh(self) -> bool:
        return self.vertices is not None

    def mesh(self) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.faces)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray, frame: str = "W") -> "SceneMap":
        """The same scene after ``x -> rotation @ x + translation``."""
        if self.is_mesh:
            return SceneMap(vertices=self.vertices @ rotation.T + translation, faces=self.faces,
                            ground_mask=self.ground_mask, frame=frame)
        return SceneMap(points=self.points @ rotation.T + translation, normals=self.normals @ rotation.T,
                        ground_mask=self.ground_mask, frame=frame)

    def _part(self, ground_only: bool):
        key = ("part", ground_only)
        if key not in self._cache:
            if self.is_mesh:
                faces = self.faces[self.ground_mask] if ground_only else self.faces
                if len(faces) == 0:
                    raise ValueError("scene has no ground faces" if ground_only else "scene has no faces")
                self._cache[key] = (faces, BVH(faces, self.vertices), face_normals(self.vertices, faces))
            else:
                sel = self.ground_mask if ground_only else np.ones(len(self.points), bool)
                if not sel.any():
                    raise ValueError("scene has no ground points" if ground_only else "scene is empty")
                self._cache[key] = (SpatialIndex(self.points[sel]), self.normals[sel])
        return self._cache[key]

    def closest(self, queries: np.ndarray, ground_only: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest scene points (M, 3), their unit normals (M, 3) and squared distances (M,)."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        part = self._part(ground_only)
        if self.is_mesh:
            faces, tree, normals = part
            d2, fi, cp, _ = closest_points_on_mesh(q, self.vertices, faces, tree)
            return cp, normals[fi], d2
        index, normals = part
        idx, d2 = index.query(q)
        return index.points[idx], normals[idx], d2

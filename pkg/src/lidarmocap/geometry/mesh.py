"""Triangle meshes, normals and exact point-to-mesh queries.

Closest-point queries traverse a bounding-volume hierarchy whose topology is
built once per connectivity and whose boxes are refit to each new set of vertex
positions, which suits articulated bodies where only the coordinates change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

DEGENERATE_AREA2 = 1e-24
_LEAF_SIZE = 4


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _tree: "BVH | None" = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def face_normals(self) -> np.ndarray:
        return face_normals(self.vertices, self.faces)

    def bvh(self) -> "BVH":
        if self._tree is None:
            self._tree = BVH(self.faces, self.vertices)
        return self._tree

    def closest(self, points: np.ndarray):
        """See :func:`closest_points_on_mesh`."""
        return closest_points_on_mesh(points, self.vertices, self.faces, self.bvh())


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unit face normals (F, 3); degenerate faces get a zero vector."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals (N, 3)."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = np.cross(b - a, c - a)
    out = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(out, faces[:, k], n)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)


@nb.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Closest point to p on triangle abc; returns (x, y, z, u, v, w) with
    barycentric weights (u, v, w) for (a, b, c)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2], 1.0, 0.0, 0.0
    bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2], 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * abx, a[1] + v * aby, a[2] + v * abz, 1.0 - v, v, 0.0
    cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2], 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz, 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2]),
                0.0, 1.0 - w, w)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (a[0] + abx * v + acx * w, a[1] + aby * v + acy * w, a[2] + abz * v + acz * w,
            1.0 - v - w, v, w)


@nb.njit(cache=True)
def _build_tree(centroids, leaf_size):
    """Median-split hierarchy over face centroids. Nodes are emitted in
    pre-order, so every child has a larger index than its parent."""
    n = centroids.shape[0]
    max_nodes = 2 * n + 1
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    perm = np.arange(n)
    stack = np.zeros((max_nodes, 3), np.int64)  # node, begin, end
    n_nodes = 1
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    top = 1
    while top > 0:
        top -= 1
        node, s, e = stack[top, 0], stack[top, 1], stack[top, 2]
        start[node] = s
        count[node] = e - s
        if e - s <= leaf_size:
            continue
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for i in range(s, e):
            for k in range(3):
                v = centroids[perm[i], k]
                lo[k] = min(lo[k], v)
                hi[k] = max(hi[k], v)
        axis = np.argmax(hi - lo)
        keys = np.empty(e - s)
        for i in range(s, e):
            keys[i - s] = centroids[perm[i], axis]
        order = np.argsort(keys, kind="mergesort")
        seg = perm[s:e].copy()
        for i in range(e - s):
            perm[s + i] = seg[order[i]]
        mid = (s + e) // 2
        lnode, rnode = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = lnode, rnode
        stack[top, 0], stack[top, 1], stack[top, 2] = rnode, mid, e
        top += 1
        stack[top, 0], stack[top, 1], stack[top, 2] = lnode, s, mid
        top += 1
    return left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], perm


@nb.njit(cache=True)
def _refit(vertices, faces, left, right, start, count, perm):
    n_nodes = left.shape[0]
    lo = np.empty((n_nodes, 3))
    hi = np.empty((n_nodes, 3))
    for node in range(n_nodes - 1, -1, -1):
        if left[node] < 0:
            for k in range(3):
                lo[node, k] = np.inf
                hi[node, k] = -np.inf
            for i in range(start[node], start[node] + count[node]):
                f = perm[i]
                for c in range(3):
                    v = faces[f, c]
                    for k in range(3):
                        lo[node, k] = min(lo[node, k], vertices[v, k])
                        hi[node, k] = max(hi[node, k], vertices[v, k])
        else:
            for k in range(3):
                lo[node, k] = min(lo[left[node], k], lo[right[node], k])
                hi[node, k] = max(hi[left[node], k], hi[right[node], k])
    return lo, hi


@nb.njit(cache=True)
def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            t = lo[k] - p[k]
            d += t * t
        elif p[k] > hi[k]:
            t = p[k] - hi[k]
            d += t * t
    return d


@nb.njit(cache=True)
def _query_tree(points, vertices, faces, valid, left, right, start, count, perm, lo, hi):
    m = points.shape[0]
    best_d = np.full(m, np.inf)
    best_f = np.full(m, -1, np.int64)
    closest = np.zeros((m, 3))
    bary = np.zeros((m, 3))
    stack = np.empty(128, np.int64)
    for q in range(m):
        p = points[q]
        top = 0
        stack[top] = 0
        top += 1
        bd = np.inf
        bf = -1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, lo[node], hi[node]) > bd:
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    f = perm[i]
                    if not valid[f]:
                        continue
                    x, y, z, u, v, w = _closest_on_triangle(
                        p, vertices[faces[f, 0]], vertices[faces[f, 1]], vertices[faces[f, 2]])
                    d = (p[0] - x) ** 2 + (p[1] - y) ** 2 + (p[2] - z) ** 2
                    if d < bd or (d == bd and f < bf):
                        bd = d
                        bf = f
                        closest[q, 0], closest[q, 1], closest[q, 2] = x, y, z
                        bary[q, 0], bary[q, 1], bary[q, 2] = u, v, w
            else:
                dl = _box_dist2(p, lo[left[node]], hi[left[node]])
                dr = _box_dist2(p, lo[right[node]], hi[right[node]])
                # push the farther child first so the nearer one is visited first
                if dl <= dr:
                    stack[top] = right[node]
                    stack[top + 1] = left[node]
                else:
                    stack[top] = left[node]
                    stack[top + 1] = right[node]
                top += 2
        best_d[q] = bd
        best_f[q] = bf
    return best_d, best_f, closest, bary


@nb.njit(cache=True)
def _valid_faces(vertices, faces):
    n = faces.shape[0]
    out = np.ones(n, np.bool_)
    for f in range(n):
        a = vertices[faces[f, 0]]
        b = vertices[faces[f, 1]]
        c = vertices[faces[f, 2]]
        ux, uy, uz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
        vx, vy, vz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
        nx = uy * vz - uz * vy
        ny = uz * vx - ux * vz
        nz = ux * vy - uy * vx
        if nx * nx + ny * ny + nz * nz < DEGENERATE_AREA2:
            out[f] = False
    return out


class BVH:
    """Hierarchy topology for a fixed face list (built from one vertex set)."""

    def __init__(self, faces: np.ndarray, vertices: np.ndarray, leaf_size: int = _LEAF_SIZE):
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        if len(self.faces) == 0:
            raise ValueError("mesh has no faces")
        centroids = v[self.faces].mean(axis=1)
        self.left, self.right, self.start, self.count, self.perm = _build_tree(centroids, leaf_size)


def closest_points_on_mesh(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray,
                           tree: BVH | None = None):
    """Exact closest points on a triangle mesh.

    Degenerate (zero-area) faces are ignored; ties resolve to the lowest face
    index.

    Returns:
        sqdist (M,), face index (M,), closest points (M, 3), barycentric
        weights (M, 3). Queries against a mesh with no valid face get an
        infinite distance and face index -1.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    f = np.ascontiguousarray(faces, dtype=np.int64)
    if tree is None:
        tree = BVH(f, v)
    lo, hi = _refit(v, f, tree.left, tree.right, tree.start, tree.count, tree.perm)
    valid = _valid_faces(v, f)
    return _query_tree(pts, v, f, valid, tree.left, tree.right, tree.start, tree.count, tree.perm, lo, hi)


def point_to_mesh(point: np.ndarray, mesh: TriangleMesh) -> tuple[np.ndarray, float, np.ndarray]:
    """Closest point, squared distance and face normal for a single query."""
    d2, fi, cp, _ = mesh.closest(np.asarray(point, dtype=np.float64)[None])
    if fi[0] < 0:
        raise ValueError("mesh has no non-degenerate face")
    return cp[0], float(d2[0]), mesh.face_normals[fi[0]]


def connected_components(n_vertices: int, faces: np.ndarray) -> np.ndarray:
    """Component label per vertex, where faces connect their three vertices."""
    parent = np.arange(n_vertices)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, c in faces:
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[find(rc)] = ra
    roots = np.array([find(i) for i in range(n_vertices)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels

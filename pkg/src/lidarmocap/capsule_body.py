"""Procedural low-resolution body with the 24-joint SMPL layout.

The body is a set of closed convex primitives (capsules, spheres, boxes), each
rigidly or smoothly skinned to the joints it moves with. Neighbouring body
regions never touch in the rest pose, so a physically valid motion produces no
self-penetration between regions. The axes follow the usual parametric-body
convention: +Y up, +Z forward and +X toward the body's left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import REGION_NAMES, SMPL_JOINT_NAMES, SMPL_PARENTS, BodyModel

SOLE_HEIGHT = -0.93


def _rest_joints() -> np.ndarray:
    j = np.zeros((24, 3))
    j[1] = (0.09, -0.08, 0.0)
    j[3] = (0.0, 0.11, 0.0)
    j[4] = (0.09, -0.47, 0.0)
    j[6] = (0.0, 0.24, 0.0)
    j[7] = (0.09, -0.85, 0.0)
    j[9] = (0.0, 0.30, 0.0)
    j[10] = (0.09, -0.90, 0.10)
    j[12] = (0.0, 0.50, 0.0)
    j[13] = (0.07, 0.42, 0.0)
    j[15] = (0.0, 0.60, 0.0)
    j[16] = (0.18, 0.44, 0.0)
    arm = np.array([np.sin(np.radians(25.0)), -np.cos(np.radians(25.0)), 0.0])
    j[18] = j[16] + 0.27 * arm
    j[20] = j[18] + 0.25 * arm
    j[22] = j[20] + 0.08 * arm
    for left, right in ((1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21), (22, 23)):
        j[right] = j[left] * np.array([-1.0, 1.0, 1.0])
    return j


@dataclass
class _Part:
    vertices: np.ndarray
    faces: np.ndarray
    weights: np.ndarray
    region: str


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip faces whose normal points toward the centroid (valid for star-shaped parts)."""
    c = vertices.mean(0)
    a, b, d = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = np.cross(b - a, d - a)
    flip = np.einsum("ij,ij->i", n, (a + b + d) / 3.0 - c) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return faces


def _ring_surface(rings: list[np.ndarray], bottom: np.ndarray, top: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed surface from stacked rings of equal size plus two pole vertices."""
    m = rings[0].shape[0]
    verts = np.vstack([bottom[None]] + rings + [top[None]])
    faces = []
    for i in range(m):
        faces.append((0, 1 + (i + 1) % m, 1 + i))
    for r in range(len(rings) - 1):
        base0, base1 = 1 + r * m, 1 + (r + 1) * m
        for i in range(m):
            i1 = (i + 1) % m
            faces.append((base0 + i, base0 + i1, base1 + i1))
            faces.append((base0 + i, base1 + i1, base1 + i))
    top_i = verts.shape[0] - 1
    last = 1 + (len(rings) - 1) * m
    for i in range(m):
        faces.append((last + i, last + (i + 1) % m, top_i))
    faces = np.asarray(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces)


def _capsule(p0, p1, radius: float, n_around: int, n_body: int, n_cap: int,
             radius_b: float | None = None, cap_height: float | None = None, side=None):
    """Capsule around the segment p0-p1 with (possibly elliptic) cross-section."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    u = p1 - p0
    length = np.linalg.norm(u)
    u = u / length
    ref = np.array([1.0, 0.0, 0.0]) if side is None else np.asarray(side, float)
    if abs(ref @ u) > 0.9:
        ref = np.array([0.0, 0.0, 1.0])
    e1 = ref - (ref @ u) * u
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    ra = radius
    rb = radius if radius_b is None else radius_b
    h = radius if cap_height is None else cap_height
    phi = 2 * np.pi * np.arange(n_around) / n_around

    def ring(center, s):
        return center + np.outer(np.cos(phi) * ra * s, e1) + np.outer(np.sin(phi) * rb * s, e2)

    rings = []
    for k in range(1, n_cap + 1):
        a = np.pi / 2 * k / (n_cap + 1)
        rings.append(ring(p0 - np.cos(a) * h * u, np.sin(a)))
    for k in range(n_body):
        t = k / max(n_body - 1, 1)
        rings.append(ring(p0 + t * length * u, 1.0))
    for k in range(n_cap, 0, -1):
        a = np.pi / 2 * k / (n_cap + 1)
        rings.append(ring(p1 + np.cos(a) * h * u, np.sin(a)))
    return _ring_surface(rings, p0 - h * u, p1 + h * u)


def _sphere(center, radius: float, n_around: int, n_rings: int):
    c = np.asarray(center, float)
    rings = []
    for k in range(1, n_rings + 1):
        a = np.pi * k / (n_rings + 1)
        phi = 2 * np.pi * np.arange(n_around) / n_around
        y = -np.cos(a) * radius
        rings.append(c + np.stack([np.cos(phi) * np.sin(a) * radius, np.full_like(phi, y),
                                   np.sin(phi) * np.sin(a) * radius], axis=1))
    return _ring_surface(rings, c - (0, radius, 0), c + (0, radius, 0))


def _box(lo, hi, counts: tuple[int, int, int]):
    """Axis-aligned box surface with a regular lattice on every side."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    nx, ny, nz = counts
    index: dict[tuple[int, int, int], int] = {}
    verts = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts)
            verts.append(lo + (hi - lo) * np.array([i / nx, j / ny, k / nz]))
        return index[key]

    faces = []

    def grid(fix_axis, fix_val, a_axis, b_axis, na, nb):
        for a in range(na):
            for b in range(nb):
                quad = []
                for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    ijk = [0, 0, 0]
                    ijk[fix_axis] = fix_val
                    ijk[a_axis] = a + da
                    ijk[b_axis] = b + db
                    quad.append(vid(*ijk))
                faces.append((quad[0], quad[1], quad[2]))
                faces.append((quad[0], quad[2], quad[3]))

    n = (nx, ny, nz)
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for val in (0, n[axis]):
            grid(axis, val, others[0], others[1], n[others[0]], n[others[1]])
    verts = np.asarray(verts)
    faces = np.asarray(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces), index


def _rigid(n_verts: int, joint: int) -> np.ndarray:
    w = np.zeros((n_verts, 24))
    w[:, joint] = 1.0
    return w


def _torso_weights(verts: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Blend along the spine: each vertex interpolates between the two spine
    joints bracketing its height."""
    chain = [0, 3, 6, 9]
    heights = joints[chain, 1]
    w = np.zeros((verts.shape[0], 24))
    y = np.clip(verts[:, 1], heights[0], heights[-1])
    seg = np.clip(np.searchsorted(heights, y, side="right") - 1, 0, len(chain) - 2)
    t = (y - heights[seg]) / (heights[seg + 1] - heights[seg])
    rows = np.arange(verts.shape[0])
    w[rows, np.asarray(chain)[seg]] = 1.0 - t
    w[rows, np.asarray(chain)[seg + 1]] += t
    return w


def _regressor(verts: np.ndarray, joints: np.ndarray, k: int = 16) -> np.ndarray:
    """Affine weights over the k vertices nearest each joint that reproduce the
    joint exactly: minimum deviation from uniform weights subject to
    sum(w) = 1 and w @ V = joint."""
    reg = np.zeros((joints.shape[0], verts.shape[0]))
    for j, p in enumerate(joints):
        d = np.linalg.norm(verts - p, axis=1)
        idx = np.argsort(d, kind="stable")[:k]
        a = np.vstack([np.ones(k), verts[idx].T])
        b = np.concatenate([[1.0], p])
        w0 = np.full(k, 1.0 / k)
        lam = np.linalg.solve(a @ a.T, b - a @ w0)
        reg[j, idx] = w0 + a.T @ lam
    return reg


def build_capsule_body() -> BodyModel:
    """The bundled 24-joint test body (about 760 vertices)."""
    joints = _rest_joints()
    parts: list[_Part] = []

    v, f = _capsule((0, 0.06, 0), (0, 0.38, 0), 0.12, 12, 5, 2, radius_b=0.085, cap_height=0.05)
    parts.append(_Part(v, f, _torso_weights(v, joints), "torso"))
    v, f = _sphere((0.0, 0.67, 0.02), 0.10, 10, 5)
    parts.append(_Part(v, f, _rigid(len(v), 15), "head"))

    feet = {}
    for side, (sh, el, wr, hip, knee, ank) in {
        "left": (16, 18, 20, 1, 4, 7),
        "right": (17, 19, 21, 2, 5, 8),
    }.items():
        v, f = _capsule(joints[sh], joints[el], 0.045, 8, 4, 1)
        parts.append(_Part(v, f, _rigid(len(v), sh), f"{side}_arm"))
        v, f = _capsule(joints[el], joints[wr], 0.04, 8, 4, 1)
        parts.append(_Part(v, f, _rigid(len(v), el), f"{side}_arm"))
        direction = (joints[wr] - joints[el]) / np.linalg.norm(joints[wr] - joints[el])
        v, f = _sphere(joints[wr] + 0.10 * direction, 0.04, 6, 3)
        parts.append(_Part(v, f, _rigid(len(v), wr), f"{side}_hand"))
        v, f = _capsule(joints[hip], joints[knee], 0.065, 10, 5, 1)
        parts.append(_Part(v, f, _rigid(len(v), hip), f"{side}_leg"))
        v, f = _capsule(joints[knee], joints[ank], 0.05, 8, 5, 1)
        parts.append(_Part(v, f, _rigid(len(v), knee), f"{side}_leg"))
        x = joints[ank, 0]
        v, f, index = _box((x - 0.045, SOLE_HEIGHT, -0.06), (x + 0.045, -0.86, 0.17), (2, 1, 5))
        sole = np.array(sorted(i for (a, b, c), i in index.items() if b == 0))
        feet[side] = (len(parts), sole)
        parts.append(_Part(v, f, _rigid(len(v), ank), f"{side}_leg"))

    offsets = np.cumsum([0] + [len(p.vertices) for p in parts])
    verts = np.vstack([p.vertices for p in parts])
    faces = np.vstack([p.faces + o for p, o in zip(parts, offsets)])
    weights = np.vstack([p.weights for p in parts])
    labels = np.concatenate([np.full(len(p.vertices), REGION_NAMES.index(p.region)) for p in parts])
    foot_left = feet["left"][1] + offsets[feet["left"][0]]
    foot_right = feet["right"][1] + offsets[feet["right"][0]]

    shape_dirs = np.zeros((verts.shape[0], 3, 10))
    shape_dirs[:, :, 0] = 0.05 * verts
    shape_dirs[:, 1, 1] = 0.05 * verts[:, 1]
    shape_dirs[:, 0, 2] = 0.05 * verts[:, 0]
    shape_dirs[:, 2, 2] = 0.05 * verts[:, 2]

    return BodyModel(
        template_vertices=verts,
        faces=faces,
        shape_dirs=shape_dirs,
        joint_regressor=_regressor(verts, joints),
        parents=np.array(SMPL_PARENTS),
        skin_weights=weights,
        region_labels=labels,
        foot_left=foot_left,
        foot_right=foot_right,
        joint_names=SMPL_JOINT_NAMES,
        region_names=REGION_NAMES,
        head_joint=15,
    )


def capsule_rest_joints() -> np.ndarray:
    """Designed rest joint positions of :func:`build_capsule_body` (zero shape)."""
    return _rest_joints()

"""Differentiable objective terms for windowed motion optimization.

Twelve terms in four families:

* smoothness: ``trans``, ``rot``, ``pose``, ``jts``
* self constraints: ``sld`` (foot sliding), ``prior`` (IMU pose prior), ``pen``
  (self-penetration)
* scene: ``cont`` (stable-foot contact), ``coll`` (scene collision)
* physical: ``l2h`` (sensor rigidly on the head, wearer only), ``v2p``
  (visible body surface to point cloud), ``p2m`` (point cloud to mesh), the
  last two only for a person observed by the LiDAR.

Nearest-neighbour style correspondences (stable feet, penetration pairs,
closest scene points, visible surface samples, closest mesh points) are found
without gradients by :func:`refresh_correspondences` and then held fixed while
the terms are evaluated, so gradients flow through distances and not through
the argmin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numba as nb
import numpy as np
import torch

from .body_model import STABLE_FOOT_THRESHOLD, BodyLayer, BodyModel, MotionSequence, stable_feet
from .errors import ConfigError, DimensionMismatchError, NonFiniteLossError
from .geometry.mesh import BVH, closest_points_on_mesh, connected_components
from .geometry.raycast import LidarSpec, cast_rays
from .geometry.scene import SceneMap
from .geometry.spatial import SpatialIndex
from .geometry.visibility import hidden_point_removal

TERM_NAMES = ("trans", "rot", "pose", "jts", "sld", "prior", "pen", "cont", "coll", "l2h", "v2p", "p2m")
FAMILIES = {
    "smt": ("trans", "rot", "pose", "jts"),
    "self": ("sld", "prior", "pen"),
    "scene": ("cont", "coll"),
    "phy": ("l2h", "v2p", "p2m"),
}
P2M_CAP = 0.15
_BODY_TERMS = {"jts", "sld", "pen", "cont", "coll", "l2h", "v2p", "p2m"}


@dataclass
class LossWeights:
    """Non-negative coefficient per term."""

    trans: float = 4.0
    rot: float = 1.0
    pose: float = 4.0
    jts: float = 4.0
    sld: float = 1.0
    prior: float = 1.0
    pen: float = 1.0
    cont: float = 1.0
    coll: float = 2.0
    l2h: float = 1.0
    v2p: float = 1.0
    p2m: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    def __getitem__(self, name: str) -> float:
        return getattr(self, name)

    def as_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in TERM_NAMES}

    @classmethod
    def from_dict(cls, values: dict) -> "LossWeights":
        unknown = set(values) - set(TERM_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def only(cls, *names: str, value: float = 1.0) -> "LossWeights":
        """Weights with every term off except ``names``."""
        return cls(**{n: (value if n in names else 0.0) for n in TERM_NAMES})


def _tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


@dataclass(eq=False)
class WindowContext:
    """Variables and fixed inputs of one optimization window of ``k`` frames.

    ``T`` (k, 3), ``R`` (k, 3) and ``theta`` (k, J-1, 3) are torch tensors that
    the optimizer may mark as requiring gradients. Everything else is fixed
    data in world coordinates.
    """

    model: BodyModel
    T: torch.Tensor
    R: torch.Tensor
    theta: torch.Tensor
    beta: np.ndarray | None = None
    theta_prior: np.ndarray | None = None
    scene: SceneMap | None = None
    crops: list[np.ndarray] | None = None
    visible: np.ndarray | None = None
    lidar_positions: np.ndarray | None = None
    lidar_rotations: np.ndarray | None = None
    t_hl: np.ndarray | None = None
    sensor: LidarSpec = field(default_factory=LidarSpec)
    iteration: int = 1
    use_l2h: bool = False
    use_point_cloud: bool = False
    p2m_cap: float = P2M_CAP
    hpr_radius_exponent: float = 2.0
    stable_threshold: float = STABLE_FOOT_THRESHOLD
    pen_margin: float = 0.05
    coll_margin: float = 0.05
    resample_tolerance: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.T, self.R, self.theta = _tensor(self.T), _tensor(self.R), _tensor(self.theta)
        k = self.k
        if k < 2:
            raise ValueError("a window needs at least two frames")
        if self.R.shape != (k, 3) or self.T.shape != (k, 3) or self.theta.shape != (k, self.model.n_joints - 1, 3):
            raise DimensionMismatchError("T, R, theta shapes do not match the window and body model")
        if self.theta_prior is None:
            self.theta_prior = self.theta.detach().numpy().copy()
        self.theta_prior = np.asarray(self.theta_prior, float)
        if self.visible is None:
            self.visible = np.ones(k, bool) if self.crops is not None else np.zeros(k, bool)
        self.visible = np.asarray(self.visible, bool)
        if self.visible.shape != (k,):
            raise DimensionMismatchError("visibility mask length differs from the window length")
        if self.crops is not None and len(self.crops) != k:
            raise DimensionMismatchError("one crop per frame is required")
        if self.lidar_positions is not None:
            self.lidar_positions = np.asarray(self.lidar_positions, float).reshape(k, 3)
        if self.lidar_rotations is not None:
            self.lidar_rotations = np.asarray(self.lidar_rotations, float).reshape(k, 3, 3)

    @property
    def k(self) -> int:
        return int(self.T.shape[0])

    @classmethod
    def from_motion(cls, model: BodyModel, motion: MotionSequence, **kwargs) -> "WindowContext":
        return cls(model, motion.T.copy(), motion.R.copy(), motion.theta.copy(), beta=motion.beta.copy(), **kwargs)

    @property
    def layer(self) -> BodyLayer:
        if "layer" not in self._cache:
            self._cache["layer"] = BodyLayer(self.model)
        return self._cache["layer"]

    def beta_tensor(self) -> torch.Tensor | None:
        return None if self.beta is None else _tensor(self.beta)

    def forward(self):
        """Posed vertices (k, N, 3), joints (k, J, 3), global rotations (k, J, 3, 3)."""
        return self.layer.forward_full(self.T, self.R, self.theta, self.beta_tensor())

    def crop_index(self, i: int) -> SpatialIndex:
        key = ("crop", i)
        if key not in self._cache:
            self._cache[key] = SpatialIndex(self.crops[i])
        return self._cache[key]

    def sensor_rotation(self, i: int) -> np.ndarray:
        return np.eye(3) if self.lidar_rotations is None else self.lidar_rotations[i]

    def observed_frames(self) -> np.ndarray:
        """Indices of frames with a visible, non-empty crop."""
        if self.crops is None:
            return np.zeros(0, np.int64)
        return np.array([i for i in range(self.k) if self.visible[i] and len(self.crops[i]) > 0], np.int64)


def active_terms(ctx: WindowContext, weights: LossWeights, disabled: tuple[str, ...] = ()) -> list[str]:
    """Terms that contribute for this context: positive weight, role-enabled, not disabled."""
    out = []
    for n in TERM_NAMES:
        if weights[n] <= 0 or n in disabled:
            continue
        if n == "l2h" and not ctx.use_l2h:
            continue
        if n in ("v2p", "p2m") and not ctx.use_point_cloud:
            continue
        if n in ("cont", "coll") and ctx.scene is None:
            continue
        out.append(n)
    return out


@dataclass(eq=False)
class Correspondences:
    """Fixed pairings used by the data terms during one iteration."""

    pair_feet: list = field(default_factory=list)
    pen: tuple | None = None
    cont: tuple | None = None
    coll: tuple | None = None
    v2p: tuple | None = None
    p2m: tuple | None = None


def _region_parts(model: BodyModel) -> list[tuple[int, np.ndarray]]:
    """Connected mesh pieces split by body region, as (region, vertex indices)."""
    comp = connected_components(model.n_vertices, model.faces)
    parts = []
    for c in range(comp.max() + 1):
        for r in np.unique(model.region_labels[comp == c]):
            idx = np.flatnonzero((comp == c) & (model.region_labels == r))
            parts.append((int(r), idx))
    return parts


def _frame_feet(model: BodyModel, label: str | None) -> np.ndarray | None:
    if label == "left":
        return model.foot_left
    if label == "right":
        return model.foot_right
    return None


@nb.njit(cache=True)
def _winding(v, faces, pf_ptr, pf_idx, part, x0, x1, x2):
    """Generalized winding number of point x about the closed surface of ``part``."""
    total = 0.0
    for t in range(pf_ptr[part], pf_ptr[part + 1]):
        fc = faces[pf_idx[t]]
        a0, a1, a2 = v[fc[0], 0] - x0, v[fc[0], 1] - x1, v[fc[0], 2] - x2
        b0, b1, b2 = v[fc[1], 0] - x0, v[fc[1], 1] - x1, v[fc[1], 2] - x2
        c0, c1, c2 = v[fc[2], 0] - x0, v[fc[2], 1] - x1, v[fc[2], 2] - x2
        la = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        lb = np.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
        lc = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
        det = a0 * (b1 * c2 - b2 * c1) - a1 * (b0 * c2 - b2 * c0) + a2 * (b0 * c1 - b1 * c0)
        den = (la * lb * lc + (a0 * b0 + a1 * b1 + a2 * b2) * lc + (b0 * c0 + b1 * c1 + b2 * c2) * la
               + (c0 * a0 + c1 * a1 + c2 * a2) * lb)
        total += 2.0 * np.arctan2(det, den)
    return total / (4.0 * np.pi)


@nb.njit(cache=True)
def _pen_kernel(verts, faces, vf_ptr, vf_idx, labels, n_regions, part_ptr, part_idx, part_region,
                reg_ptr, reg_idx, vert_part, pf_ptr, pf_idx, margin, out_f, out_a, out_b):
    n_frames, n_verts = verts.shape[0], verts.shape[1]
    n_parts = part_region.shape[0]
    centers = np.zeros((n_parts, 3))
    radii = np.zeros(n_parts)
    hit = np.zeros(n_regions, np.bool_)
    count = 0
    for f in range(n_frames):
        v = verts[f]
        for p in range(n_parts):
            c0 = c1 = c2 = 0.0
            n = part_ptr[p + 1] - part_ptr[p]
            for t in range(part_ptr[p], part_ptr[p + 1]):
                i = part_idx[t]
                c0 += v[i, 0]
                c1 += v[i, 1]
                c2 += v[i, 2]
            c0 /= n
            c1 /= n
            c2 /= n
            r = 0.0
            for t in range(part_ptr[p], part_ptr[p + 1]):
                i = part_idx[t]
                d = (v[i, 0] - c0) ** 2 + (v[i, 1] - c1) ** 2 + (v[i, 2] - c2) ** 2
                if d > r:
                    r = d
            centers[p, 0], centers[p, 1], centers[p, 2] = c0, c1, c2
            radii[p] = np.sqrt(r) + margin
        for a in range(n_verts):
            ra = labels[a]
            hit[:] = False
            for p in range(n_parts):
                if part_region[p] == ra:
                    continue
                d = (v[a, 0] - centers[p, 0]) ** 2 + (v[a, 1] - centers[p, 1]) ** 2 + (v[a, 2] - centers[p, 2]) ** 2
                if d <= radii[p] * radii[p]:
                    hit[part_region[p]] = True
            for rb in range(n_regions):
                if not hit[rb]:
                    continue
                best = -1
                bd = np.inf
                for t in range(reg_ptr[rb], reg_ptr[rb + 1]):
                    i = reg_idx[t]
                    d = (v[a, 0] - v[i, 0]) ** 2 + (v[a, 1] - v[i, 1]) ** 2 + (v[a, 2] - v[i, 2]) ** 2
                    if d < bd:
                        bd = d
                        best = i
                n0 = n1 = n2 = 0.0
                for t in range(vf_ptr[best], vf_ptr[best + 1]):
                    fc = faces[vf_idx[t]]
                    x0, x1, x2 = v[fc[0]], v[fc[1]], v[fc[2]]
                    e0 = x1 - x0
                    e1 = x2 - x0
                    n0 += e0[1] * e1[2] - e0[2] * e1[1]
                    n1 += e0[2] * e1[0] - e0[0] * e1[2]
                    n2 += e0[0] * e1[1] - e0[1] * e1[0]
                nn = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
                if nn == 0.0:
                    continue
                val = -((v[a, 0] - v[best, 0]) * n0 + (v[a, 1] - v[best, 1]) * n1
                        + (v[a, 2] - v[best, 2]) * n2) / nn
                # a positive depth only counts when a is really inside b's closed part;
                # beside a convex corner the half-space test alone fires spuriously
                if val > 0.0 and _winding(v, faces, pf_ptr, pf_idx, vert_part[best],
                                          v[a, 0], v[a, 1], v[a, 2]) < 0.5:
                    continue
                if val > -margin:
                    if count < out_f.shape[0]:
                        out_f[count] = f
                        out_a[count] = a
                        out_b[count] = best
                    count += 1
    return count


def _csr(groups: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(groups) + 1, np.int64)
    ptr[1:] = np.cumsum([len(g) for g in groups])
    idx = np.concatenate(groups).astype(np.int64) if groups else np.zeros(0, np.int64)
    return ptr, idx


def _pen_tables(model: BodyModel) -> dict:
    parts = _region_parts(model)
    n_regions = len(model.region_names)
    faces = np.ascontiguousarray(model.faces, np.int64)
    vf = [[] for _ in range(model.n_vertices)]
    for fi, tri in enumerate(faces):
        for v in tri:
            vf[v].append(fi)
    vf_ptr, vf_idx = _csr([np.array(x, np.int64) for x in vf])
    part_ptr, part_idx = _csr([idx for _, idx in parts])
    reg_ptr, reg_idx = _csr([np.flatnonzero(model.region_labels == r) for r in range(n_regions)])
    vert_part = np.zeros(model.n_vertices, np.int64)
    for p, (_, idx) in enumerate(parts):
        vert_part[idx] = p
    pf_ptr, pf_idx = _csr([np.flatnonzero(vert_part[faces[:, 0]] == p) for p in range(len(parts))])
    return dict(vert_part=vert_part, pf_ptr=pf_ptr, pf_idx=pf_idx, faces=faces, vf_ptr=vf_ptr, vf_idx=vf_idx, labels=np.asarray(model.region_labels, np.int64),
                n_regions=n_regions, part_ptr=part_ptr, part_idx=part_idx,
                part_region=np.array([r for r, _ in parts], np.int64), reg_ptr=reg_ptr, reg_idx=reg_idx)


def _pen_pairs(ctx: WindowContext, verts: np.ndarray):
    """Candidate (frame, a, b) triples for self-penetration.

    A vertex ``a`` is tested against another region only when it lies inside
    the bounding sphere (inflated by ``pen_margin``) of one of that region's
    connected parts; ``b`` is its nearest vertex over the whole other region.
    Pairs whose signed depth is below ``-pen_margin`` are dropped since they
    cannot become active within one small step, and pairs with positive depth
    are kept only when ``a`` lies inside the closed part that contains ``b``.
    """
    if "pen_tables" not in ctx._cache:
        ctx._cache["pen_tables"] = _pen_tables(ctx.model)
    t = ctx._cache["pen_tables"]
    v = np.ascontiguousarray(verts, np.float64)
    args = (v, t["faces"], t["vf_ptr"], t["vf_idx"], t["labels"], t["n_regions"], t["part_ptr"],
            t["part_idx"], t["part_region"], t["reg_ptr"], t["reg_idx"], t["vert_part"], t["pf_ptr"], t["pf_idx"],
            float(ctx.pen_margin))
    cap = v.shape[0] * v.shape[1]
    while True:
        f, a, b = np.empty(cap, np.int64), np.empty(cap, np.int64), np.empty(cap, np.int64)
        n = _pen_kernel(*args, f, a, b)
        if n <= cap:
            return f[:n], a[:n], b[:n]
        cap = n


def _coll_candidates(ctx: WindowContext, verts: np.ndarray) -> np.ndarray:
    """Flat (frame * N + vertex) indices of vertices that may touch the scene.

    A connected body part is skipped in a frame when its bounding sphere lies
    entirely outside the scene surface by more than ``coll_margin``.
    """
    if "parts" not in ctx._cache:
        ctx._cache["parts"] = _region_parts(ctx.model)
    parts = ctx._cache["parts"]
    k, n = verts.shape[:2]
    centers = np.stack([verts[:, idx].mean(1) for _, idx in parts], axis=1)
    radii = np.stack([np.sqrt(((verts[:, idx] - centers[:, p, None]) ** 2).sum(-1).max(1))
                      for p, (_, idx) in enumerate(parts)], axis=1)
    sp, sn, d2 = ctx.scene.closest(centers.reshape(-1, 3))
    inside = ((sp - centers.reshape(-1, 3)) * sn).sum(-1) > 0
    near = (np.sqrt(d2) <= radii.reshape(-1) + ctx.coll_margin) | inside
    near = near.reshape(k, len(parts))
    out = []
    for p, (_, idx) in enumerate(parts):
        fr = np.flatnonzero(near[:, p])
        if fr.size:
            out.append((fr[:, None] * n + idx[None, :]).reshape(-1))
    return np.sort(np.concatenate(out)) if out else np.zeros(0, np.int64)


def refresh_correspondences(ctx: WindowContext, terms: list[str] | tuple[str, ...] = TERM_NAMES,
                            verts: np.ndarray | None = None) -> Correspondences:
    """Recompute all pairings needed by ``terms`` at the current variables.

    ``verts`` may pass already posed vertices (k, N, 3) to skip a forward pass.
    """
    corr = Correspondences()
    needs_body = bool(_BODY_TERMS & set(terms)) or "sld" in terms
    if not needs_body:
        return corr
    if verts is None:
        with torch.no_grad():
            verts = ctx.forward()[0].numpy()
    model = ctx.model
    k = ctx.k
    corr.pair_feet = stable_feet(verts, model.foot_left, model.foot_right, ctx.stable_threshold)
    frame_feet = [corr.pair_feet[0]] + list(corr.pair_feet)

    if "pen" in terms:
        corr.pen = _pen_pairs(ctx, verts)

    if "cont" in terms and ctx.scene is not None:
        if not ctx.scene.ground_mask.any():
            raise ConfigError("foot contact needs ground elements in the scene")
        fr, vi, w = [], [], []
        for i, lab in enumerate(frame_feet):
            idx = _frame_feet(model, lab)
            if idx is None:
                continue
            fr.append(np.full(idx.size, i))
            vi.append(idx)
            w.append(np.full(idx.size, 1.0 / idx.size))
        if fr:
            fr, vi, w = np.concatenate(fr), np.concatenate(vi), np.concatenate(w)
            target, _, _ = ctx.scene.closest(verts[fr, vi], ground_only=True)
        else:
            fr = vi = np.zeros(0, np.int64)
            w = np.zeros(0)
            target = np.zeros((0, 3))
        corr.cont = (fr, vi, target, w)

    if "coll" in terms and ctx.scene is not None:
        cand = _coll_candidates(ctx, verts)
        flat = verts.reshape(-1, 3)[cand]
        sp, sn, _ = ctx.scene.closest(flat)
        keep = ((sp - flat) * sn).sum(-1) > -ctx.coll_margin
        fr, vi = np.divmod(cand[keep], model.n_vertices)
        corr.coll = (fr, vi, sp[keep], sn[keep])

    observed = ctx.observed_frames() if ctx.use_point_cloud else np.zeros(0, np.int64)
    if "v2p" in terms and observed.size:
        fr, fa, ba, tg, w = [], [], [], [], []
        samples = ctx._cache.setdefault("v2p_samples", {})
        for i in observed:
            prev = samples.get(int(i))
            if prev is None or np.abs(verts[i] - prev[0]).max() > ctx.resample_tolerance:
                prev = (verts[i].copy(), *_visible_samples(ctx, verts[i], i))
                samples[int(i)] = prev
            hit_faces, hit_bary = prev[1], prev[2]
            n = len(hit_faces)
            if n == 0:
                continue
            tri = verts[i][model.faces[hit_faces]]
            points = np.einsum("mj,mjc->mc", hit_bary, tri)
            idx, _ = ctx.crop_index(i).query(points)
            fr.append(np.full(n, i))
            fa.append(hit_faces)
            ba.append(hit_bary)
            tg.append(ctx.crops[i][idx])
            w.append(np.full(n, 1.0 / n))
        if fr:
            corr.v2p = tuple(np.concatenate(x) for x in (fr, fa, ba, tg, w))

    if "p2m" in terms and observed.size:
        if "bvh" not in ctx._cache:
            ctx._cache["bvh"] = BVH(model.faces, verts[0])
        tree = ctx._cache["bvh"]
        fr, fa, ba, pts, w, sat = [], [], [], [], [], []
        for i in observed:
            crop = np.asarray(ctx.crops[i], float)
            d2, fi, _, bary = closest_points_on_mesh(crop, verts[i], model.faces, tree)
            n = len(crop)
            fr.append(np.full(n, i))
            fa.append(fi)
            ba.append(bary)
            pts.append(crop)
            w.append(np.full(n, 1.0 / n))
            sat.append(d2 >= ctx.p2m_cap)
        corr.p2m = tuple(np.concatenate(x) for x in (fr, fa, ba, pts, w, sat))
    return corr


def _visible_samples(ctx: WindowContext, verts: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Surface samples of the body as the sensor would see it in frame ``i``.

    Vertices hidden from the sensor are removed, faces with all three vertices
    visible are kept, and these faces are intersected with the sensor's ray
    grid. Returns hit face indices and barycentric weights.
    """
    model = ctx.model
    origin = ctx.lidar_positions[i]
    vis = np.zeros(model.n_vertices, bool)
    vis[hidden_point_removal(verts, origin, ctx.hpr_radius_exponent)] = True
    face_mask = vis[model.faces].all(1)
    if not face_mask.any():
        return np.zeros(0, np.int64), np.zeros((0, 3))
    hits = cast_rays(verts, model.faces, origin, ctx.sensor_rotation(i), ctx.sensor, face_mask)
    return hits.faces, hits.bary


def _vertex_faces_padded(model: BodyModel) -> tuple[np.ndarray, np.ndarray]:
    """Incident faces per vertex as an (N, D) table padded with face 0, plus its validity mask."""
    vf = [[] for _ in range(model.n_vertices)]
    for fi, tri in enumerate(model.faces):
        for v in tri:
            vf[v].append(fi)
    width = max(len(x) for x in vf)
    table = np.zeros((model.n_vertices, width), np.int64)
    mask = np.zeros((model.n_vertices, width))
    for v, x in enumerate(vf):
        table[v, :len(x)] = x
        mask[v, :len(x)] = 1.0
    return table, mask


def _vertex_normals_at(verts: torch.Tensor, frames: torch.Tensor, vidx: np.ndarray, ctx: WindowContext) -> torch.Tensor:
    """Unit area-weighted outward vertex normals at (frame, vertex) pairs."""
    if "vf_padded" not in ctx._cache:
        ctx._cache["vf_padded"] = _vertex_faces_padded(ctx.model)
    table, mask = ctx._cache["vf_padded"]
    tri = ctx.layer.faces[torch.as_tensor(table[vidx])]
    p = verts[frames[:, None, None], tri]
    n = torch.cross(p[:, :, 1] - p[:, :, 0], p[:, :, 2] - p[:, :, 0], dim=-1)
    n = (n * torch.as_tensor(mask[vidx])[..., None]).sum(1)
    return n / torch.linalg.vector_norm(n, dim=-1, keepdim=True).clamp_min(1e-300)


def _surface_points(verts: torch.Tensor, faces: torch.Tensor, fr, fa, ba) -> torch.Tensor:
    tri = verts[torch.as_tensor(fr)[:, None], faces[torch.as_tensor(fa)]]
    return (_tensor(ba)[..., None] * tri).sum(1)


def compute_terms(ctx: WindowContext, corr: Correspondences | None = None,
                  terms: list[str] | tuple[str, ...] = TERM_NAMES, posed=None) -> dict[str, torch.Tensor]:
    """Unweighted value of each requested term, differentiable in T, R, theta.

    ``posed`` may pass the output of :meth:`WindowContext.forward` to reuse it.
    """
    terms = list(terms)
    if _BODY_TERMS & set(terms) and posed is None:
        posed = ctx.forward()
    if corr is None:
        corr = refresh_correspondences(ctx, terms, posed[0].detach().numpy() if posed is not None else None)
    k = ctx.k
    zero = ctx.T.sum() * 0.0
    out: dict[str, torch.Tensor] = {}
    T, R, theta = ctx.T, ctx.R, ctx.theta
    verts, joints, rots = posed if posed is not None else (None, None, None)
    faces = ctx.layer.faces

    for name in terms:
        if name == "trans":
            out[name] = ((T[2:] - 2 * T[1:-1] + T[:-2]) ** 2).sum(-1).mean() if k >= 3 else zero
        elif name == "rot":
            out[name] = ((R[1:] - R[:-1]) ** 2).sum(-1).mean()
        elif name == "pose":
            out[name] = ((theta[1:] - theta[:-1]) ** 2).sum((-1, -2)).mean()
        elif name == "jts":
            if k < 3:
                out[name] = zero
            else:
                rel = joints[:, 1:] - joints[:, :1]
                out[name] = ((rel[2:] - 2 * rel[1:-1] + rel[:-2]) ** 2).sum((-1, -2)).mean()
        elif name == "sld":
            total = zero
            for lab in ("left", "right"):
                pairs = np.array([i for i, x in enumerate(corr.pair_feet) if x == lab], np.int64)
                if pairs.size == 0:
                    continue
                centroid = verts[:, torch.as_tensor(np.array(_frame_feet(ctx.model, lab)))].mean(1)
                ip = torch.as_tensor(pairs)
                total = total + torch.linalg.vector_norm(centroid[ip + 1] - centroid[ip], dim=-1).sum()
            out[name] = total / (k - 1)
        elif name == "prior":
            diff = theta - _tensor(ctx.theta_prior)
            out[name] = (diff**2).sum((-1, -2)).mean() / float(ctx.iteration)
        elif name == "pen":
            f, a, b = corr.pen if corr.pen is not None else (np.zeros(0, np.int64),) * 3
            if f.size == 0:
                out[name] = zero
            else:
                ft = torch.as_tensor(f)
                n_in = -_vertex_normals_at(verts, ft, b, ctx)
                av, bv = verts[ft, torch.as_tensor(a)], verts[ft, torch.as_tensor(b)]
                out[name] = torch.relu(((av - bv) * n_in).sum(-1)).sum() / k
        elif name == "cont":
            if ctx.scene is not None and not ctx.scene.ground_mask.any():
                raise ConfigError("foot contact needs ground elements in the scene")
            if corr.cont is None or corr.cont[0].size == 0:
                out[name] = zero
            else:
                fr, vi, target, w = corr.cont
                v = verts[torch.as_tensor(fr), torch.as_tensor(vi)]
                out[name] = (_tensor(w) * ((v - _tensor(target)) ** 2).sum(-1)).sum() / k
        elif name == "coll":
            if corr.coll is None or corr.coll[0].size == 0:
                out[name] = zero
            else:
                fr, vi, sp, sn = corr.coll
                v = verts[torch.as_tensor(fr), torch.as_tensor(vi)]
                out[name] = torch.relu(((_tensor(sp) - v) * _tensor(sn)).sum(-1)).sum() / k
        elif name == "l2h":
            if ctx.lidar_positions is None or ctx.t_hl is None:
                raise ValueError("head constraint needs the sensor trajectory and head offset")
            head = ctx.model.head_joint
            rel = torch.einsum("fab,b->fa", rots[:, head], _tensor(ctx.t_hl))
            d = _tensor(ctx.lidar_positions) + rel - joints[:, head]
            out[name] = torch.linalg.vector_norm(d, dim=-1).mean()
        elif name == "v2p":
            if corr.v2p is None:
                out[name] = zero
            else:
                fr, fa, ba, tg, w = corr.v2p
                p = _surface_points(verts, faces, fr, fa, ba)
                out[name] = (_tensor(w) * ((p - _tensor(tg)) ** 2).sum(-1)).sum() / k
        elif name == "p2m":
            if corr.p2m is None:
                out[name] = zero
            else:
                fr, fa, ba, pts, w, sat = corr.p2m
                live = ~sat
                capped = float((w[sat] * ctx.p2m_cap).sum())
                p = _surface_points(verts, faces, fr[live], fa[live], ba[live])
                d2 = ((p - _tensor(pts[live])) ** 2).sum(-1)
                out[name] = ((_tensor(w[live]) * d2).sum() + capped) / k
        else:
            raise KeyError(f"unknown loss term {name!r}")
    return out


def _check_finite(values: dict[str, torch.Tensor]) -> None:
    for name, v in values.items():
        x = float(v.detach())
        if not math.isfinite(x):
            raise NonFiniteLossError(name, x)


def _family(ctx, weights, family, corr):
    names = [n for n in FAMILIES[family] if n in active_terms(ctx, weights)]
    vals = compute_terms(ctx, corr, names)
    _check_finite(vals)
    total = ctx.T.sum() * 0.0
    for n in names:
        total = total + weights[n] * vals[n]
    return total


def l_smt(ctx: WindowContext, weights: LossWeights | None = None, corr: Correspondences | None = None) -> torch.Tensor:
    """Weighted smoothness family."""
    return _family(ctx, weights or LossWeights(), "smt", corr)


def l_self(ctx: WindowContext, weights: LossWeights | None = None, corr: Correspondences | None = None) -> torch.Tensor:
    """Weighted self-constraint family (sliding, pose prior, self-penetration)."""
    return _family(ctx, weights or LossWeights(), "self", corr)


def l_scene(ctx: WindowContext, weights: LossWeights | None = None, corr: Correspondences | None = None) -> torch.Tensor:
    """Weighted scene family (foot contact, scene collision)."""
    return _family(ctx, weights or LossWeights(), "scene", corr)


def l_phy(ctx: WindowContext, weights: LossWeights | None = None, corr: Correspondences | None = None) -> torch.Tensor:
    """Weighted physical family (head constraint, visible-surface and point-to-mesh fits)."""
    return _family(ctx, weights or LossWeights(), "phy", corr)


def total_loss(ctx: WindowContext, weights: LossWeights | None = None, corr: Correspondences | None = None,
               disabled: tuple[str, ...] = (), fixed: dict[str, float] | None = None,
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of all active terms and the unweighted per-term breakdown.

    Args:
        fixed: precomputed unweighted values of terms that cannot change (they
            are added as constants and reported as given).

    Raises:
        NonFiniteLossError: naming the first non-finite term.
    """
    weights = weights or LossWeights()
    names = active_terms(ctx, weights, disabled)
    fixed = fixed or {}
    live = [n for n in names if n not in fixed]
    vals = compute_terms(ctx, corr, live)
    _check_finite(vals)
    total = ctx.T.sum() * 0.0
    breakdown: dict[str, float] = {}
    for n in names:
        if n in fixed:
            total = total + weights[n] * fixed[n]
            breakdown[n] = float(fixed[n])
        else:
            total = total + weights[n] * vals[n]
            breakdown[n] = float(vals[n].detach())
    return total, breakdown

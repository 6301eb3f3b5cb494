"""Plane fitting, rotation alignment and rigid point-cloud registration."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from .spatial import SpatialIndex


class PlaneFit(NamedTuple):
    normal: np.ndarray
    offset: float
    inliers: np.ndarray


def fit_plane_lsq(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Total-least-squares plane ``normal . x = offset`` through ``points``."""
    c = points.mean(0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return n, float(n @ c)


def ransac_plane(points: np.ndarray, threshold: float = 0.02, iterations: int = 500,
                 seed: int | np.random.Generator = 0, orient: np.ndarray | None = None,
                 min_inliers: int = 3) -> PlaneFit:
    """Dominant plane of a cloud by RANSAC followed by a least-squares refit.

    The plane is ``normal . x = offset``. Orientation: if ``orient`` is given
    the normal is flipped to have a positive dot product with it; otherwise the
    majority of the non-inlier points lies on the positive side, with ties
    broken by making the largest normal component positive.

    Raises:
        ValueError: fewer than three points, or no hypothesis reached
            ``min_inliers`` inliers.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("plane fit needs at least three points")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best_count = -1
    best_mask = None
    for _ in range(iterations):
        sample = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(sample[1] - sample[0], sample[2] - sample[0])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        mask = np.abs(pts @ n - n @ sample[0]) < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < max(3, min_inliers):
        raise ValueError("no plane hypothesis with enough inliers")
    n, d = fit_plane_lsq(pts[best_mask])
    inliers = np.flatnonzero(np.abs(pts @ n - d) < threshold)
    if len(inliers) >= 3:
        n, d = fit_plane_lsq(pts[inliers])
        inliers = np.flatnonzero(np.abs(pts @ n - d) < threshold)
    if orient is not None:
        flip = float(np.dot(n, orient)) < 0
    else:
        side = pts @ n - d
        out = np.ones(len(pts), dtype=bool)
        out[inliers] = False
        pos, neg = int(np.sum(side[out] > 0)), int(np.sum(side[out] < 0))
        flip = neg > pos if pos != neg else n[np.argmax(np.abs(n))] < 0
    if flip:
        n, d = -n, -d
    return PlaneFit(n, d, inliers)


class ProcrustesResult(NamedTuple):
    rotation: np.ndarray
    rank_deficient: bool


def procrustes_rotation(source: np.ndarray, target: np.ndarray, center: bool = True,
                        weights: np.ndarray | None = None) -> ProcrustesResult:
    """Rotation minimising ``sum ||R a_i - b_i||^2`` over proper rotations.

    Both sets are centred first unless ``center`` is False. A reflection in
    the SVD solution is corrected by flipping the smallest singular direction.
    ``rank_deficient`` is set when the cross-covariance has rank below two, in
    which case the rotation is not unique and the returned one is a best effort.
    """
    a = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError("source and target must have the same shape")
    w = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=np.float64)
    if center:
        a = a - np.average(a, axis=0, weights=w)
        b = b - np.average(b, axis=0, weights=w)
    h = (a * w[:, None]).T @ b
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    deficient = bool(s[0] <= 0 or s[1] <= 1e-12 * s[0])
    return ProcrustesResult(rot, deficient)


def rigid_fit(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping ``source`` onto ``target``."""
    ca, cb = source.mean(0), target.mean(0)
    rot = procrustes_rotation(source - ca, target - cb, center=False).rotation
    return rot, cb - rot @ ca


def yaw_of(rotation: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """Rotation about ``up`` extracted from a Z-Y-X (yaw-pitch-roll) decomposition.

    At pitch of exactly +/-90 degrees yaw and roll are not separable; the roll
    is then taken as zero and the whole in-plane angle is attributed to yaw.
    """
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    basis = _frame_with_z(up)
    local = basis.T @ rotation @ basis
    cos_pitch = np.hypot(local[0, 0], local[1, 0])
    if cos_pitch > 1e-9:
        yaw = np.arctan2(local[1, 0], local[0, 0])
    else:
        yaw = np.arctan2(-local[0, 1], local[1, 1])
    c, s = np.cos(yaw), np.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return basis @ rz @ basis.T


def yaw_angle(rotation: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> float:
    """Signed yaw (rad) of :func:`yaw_of` about ``up``."""
    up = np.asarray(up, dtype=np.float64)
    basis = _frame_with_z(up / np.linalg.norm(up))
    r = basis.T @ yaw_of(rotation, up) @ basis
    return float(np.arctan2(r[1, 0], r[0, 0]))


def _frame_with_z(up: np.ndarray) -> np.ndarray:
    """Right-handed orthonormal basis (columns) whose third axis is ``up``;
    for ``up = +Z`` this is the identity."""
    if np.allclose(up, [0.0, 0.0, 1.0]):
        return np.eye(3)
    ref = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = ref - (ref @ up) * up
    x /= np.linalg.norm(x)
    y = np.cross(up, x)
    return np.stack([x, y, up], axis=1)


class IcpResult(NamedTuple):
    rotation: np.ndarray
    translation: np.ndarray
    residual: float
    iterations: int
    converged: bool
    diverged: bool
    history: list


def icp_rigid(source: np.ndarray, target: np.ndarray | SpatialIndex, max_iterations: int = 50,
              tolerance: float = 1e-8, reject_radius: float = 0.5,
              init_rotation: np.ndarray | None = None,
              init_translation: np.ndarray | None = None) -> IcpResult:
    """Point-to-point ICP aligning ``source`` onto ``target``.

    The objective is the mean over source points of the squared nearest-target
    distance clipped at ``reject_radius**2``; pairs beyond the radius do not
    enter the rigid fit. Every accepted iteration lowers (or keeps) this
    objective. Iteration stops when the improvement drops below ``tolerance``;
    if the objective rises three times in a row the best transform so far is
    returned with ``diverged`` set.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    index = target if isinstance(target, SpatialIndex) else SpatialIndex(target)
    rot = np.eye(3) if init_rotation is None else np.asarray(init_rotation, float).copy()
    trans = np.zeros(3) if init_translation is None else np.asarray(init_translation, float).copy()
    r2 = reject_radius**2

    def evaluate(rm, tv):
        moved = src @ rm.T + tv
        idx, d2 = index.query(moved)
        return float(np.minimum(d2, r2).mean()), idx, d2 < r2

    residual, idx, mask = evaluate(rot, trans)
    best = (rot, trans, residual)
    history = [residual]
    rises = 0
    converged = False
    diverged = False
    it = 0
    for it in range(1, max_iterations + 1):
        if mask.sum() < 3:
            break
        new_rot, new_trans = rigid_fit(src[mask], index.points[idx[mask]])
        new_res, new_idx, new_mask = evaluate(new_rot, new_trans)
        history.append(new_res)
        if new_res > residual:
            rises += 1
            if rises >= 3:
                diverged = True
                warnings.warn("ICP residual increased three times in a row; returning best transform", RuntimeWarning)
                break
        else:
            rises = 0
        improvement = residual - new_res
        rot, trans, residual, idx, mask = new_rot, new_trans, new_res, new_idx, new_mask
        if residual <= best[2]:
            best = (rot, trans, residual)
        if 0 <= improvement < tolerance:
            converged = True
            break
    return IcpResult(best[0], best[1], best[2], it, converged, diverged, history)

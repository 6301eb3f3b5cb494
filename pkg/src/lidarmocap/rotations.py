"""Axis-angle and rotation-matrix helpers shared by numpy and torch code paths."""

from __future__ import annotations

import numpy as np
import torch
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for vectors of shape (..., 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrices from axis-angle vectors of shape (..., 3).

    Below an angle of 1e-8 rad the sine/cosine ratios are replaced by their
    Taylor series so the map stays smooth at the origin.
    """
    r = np.asarray(rotvec, dtype=np.float64)
    theta2 = np.sum(r * r, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    k = skew(r)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_torch(rotvec: torch.Tensor) -> torch.Tensor:
    """Differentiable Rodrigues map for tensors of shape (..., 3)."""
    theta2 = (rotvec * rotvec).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    # keep the large-angle branch finite (and its gradient) where it is unused
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    safe = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(safe)) / safe2)
    x, y, z = rotvec.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1)
    k = k.reshape(rotvec.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def matrix_to_rotvec(mat: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (angle in [0, pi]) of rotation matrices (..., 3, 3)."""
    mat = np.asarray(mat, dtype=np.float64)
    flat = mat.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(mat.shape[:-2] + (3,))


def nearest_equivalent_rotvec(rotvec: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Among the axis-angle vectors describing the same rotation as ``rotvec``,
    return the one closest to ``reference``.

    Equivalent vectors are ``r + 2*pi*k*axis`` for integer k.
    """
    r = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(r)
    if angle < SMALL_ANGLE:
        ref_angle = np.linalg.norm(reference)
        if ref_angle < np.pi:
            return r
        axis = reference / ref_angle
        k = np.round(ref_angle / (2 * np.pi))
        return r + 2 * np.pi * k * axis
    axis = r / angle
    best = r
    best_d = np.inf
    proj = float(np.dot(reference, axis))
    k0 = np.round((proj - angle) / (2 * np.pi))
    for k in (k0 - 1, k0, k0 + 1):
        cand = (angle + 2 * np.pi * k) * axis
        d = np.sum((cand - reference) ** 2)
        if d < best_d:
            best, best_d = cand, d
    return best


def unwrap_rotvec_sequence(rotvecs: np.ndarray) -> np.ndarray:
    """Make a sequence of axis-angle vectors (n, 3) temporally continuous.

    Each element is replaced by the equivalent representation nearest to its
    predecessor, so finite differences do not jump when the angle crosses pi.
    """
    rv = np.array(rotvecs, dtype=np.float64, copy=True)
    for i in range(1, len(rv)):
        rv[i] = nearest_equivalent_rotvec(rv[i], rv[i - 1])
    return rv


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Angle (rad) of the relative rotation r1^T r2 for matrices (..., 3, 3)."""
    rel = np.swapaxes(r1, -1, -2) @ r2
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    # atan2 keeps full precision near 0 and pi where arccos does not
    sin = 0.5 * np.linalg.norm(np.stack([rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0],
                                         rel[..., 1, 0] - rel[..., 0, 1]], -1), axis=-1)
    return np.arctan2(sin, cos)


def slerp_rotvec(r0: np.ndarray, r1: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Spherical interpolation between rotations given as axis-angle arrays.

    ``r0`` and ``r1`` have shape (..., 3) and ``w`` broadcasts against the
    leading dimensions. Returns axis-angle vectors of the interpolants.
    """
    r0 = np.asarray(r0, dtype=np.float64)
    r1 = np.asarray(r1, dtype=np.float64)
    shape = np.broadcast_shapes(r0.shape, r1.shape)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64)[..., None], shape[:-1] + (1,))
    a = Rotation.from_rotvec(np.array(np.broadcast_to(r0, shape)).reshape(-1, 3))
    b = Rotation.from_rotvec(np.array(np.broadcast_to(r1, shape)).reshape(-1, 3))
    delta = (a.inv() * b).as_rotvec()
    step = Rotation.from_rotvec(delta * w.reshape(-1, 1))
    return (a * step).as_rotvec().reshape(shape)


def homogeneous(rotation: np.ndarray, translation: np.ndarray | None = None) -> np.ndarray:
    """4x4 transform from a 3x3 rotation and optional translation."""
    out = np.eye(4)
    out[:3, :3] = rotation
    if translation is not None:
        out[:3, 3] = translation
    return out

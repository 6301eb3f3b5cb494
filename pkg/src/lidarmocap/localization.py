"""Placing IMU pose tracks in the world frame.

The sensor wearer is positioned through the head-mounted LiDAR trajectory and
the kinematic chain from head to pelvis. A second person is tracked from
detection boxes, with IMU motion bridging missed detections and ICP on the
visible body surface refining each detected frame. Both tracks feed back a
heading correction of the IMU-to-world rotation.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModel, MotionSequence, forward_batch, head_rotation
from .calib_sync import world_rotations
from .errors import LocalizationError
from .geometry.registration import icp_rigid, procrustes_rotation, yaw_angle, yaw_of
from .geometry.spatial import SpatialIndex
from .geometry.raycast import LidarSpec
from .geometry.visibility import observable_vertices

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Box:
    """Detection box: centre, size (length along heading, width, height), heading yaw about +Z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    score: float = 1.0
    frame_id: int = 0
    label: str = ""

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)

    def contains(self, points: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        d = np.asarray(points, float) - self.center
        local = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
        return np.all(np.abs(local) <= self.size / 2, axis=1)


@dataclass
class LocalizationConfig:
    rounds: int = 5
    yaw_tolerance_deg: float = 0.1
    quiet_seconds: float = 1.0
    quiet_speed_warning: float = 0.05
    gate_radius: float = 1.0
    min_crop_points: int = 20
    init_vote_frames: int = 40
    hpr_radius_exponent: float = 2.0
    icp_max_iterations: int = 30
    icp_reject_radius: float = 0.5


@dataclass(eq=False)
class FirstPersonResult:
    motion: MotionSequence
    R_WI: np.ndarray
    t_hl: np.ndarray
    yaw_corrections_deg: list[float] = field(default_factory=list)


@dataclass(eq=False)
class SecondPersonResult:
    motion: MotionSequence
    R_WI: np.ndarray
    crops: list
    visible: np.ndarray
    selected: np.ndarray
    yaw_corrections_deg: list[float] = field(default_factory=list)


def imu_to_world(motion: MotionSequence, R_WI: np.ndarray) -> MotionSequence:
    """Express an IMU-frame pose track in the world: rotate translations and root orientations."""
    rot = np.asarray(R_WI, float)[:3, :3]
    out = motion.copy()
    out.T = motion.T @ rot.T
    out.R = world_rotations(motion.R, rot)
    return out


def refine_world_rotation(T_imu_world: np.ndarray, T_target: np.ndarray, R_prev: np.ndarray,
                          up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """Heading correction of the IMU-to-world transform.

    The centred IMU translations are aligned to the target track by Procrustes
    and only the rotation about ``up`` of that alignment is applied to
    ``R_prev``. Accepts and returns 4x4 transforms (3x3 also accepted).
    """
    prev = np.asarray(R_prev, float)
    res = procrustes_rotation(T_imu_world, T_target)
    if res.rank_deficient:
        warnings.warn("trajectory too degenerate for a heading correction", RuntimeWarning)
    delta = yaw_of(res.rotation, up)
    out = np.eye(4)
    out[:3, :3] = delta @ prev[:3, :3]
    return out


def ground_placement(model: BodyModel, R: np.ndarray, theta: np.ndarray, beta=None,
                     ground_height: float = 0.0) -> np.ndarray:
    """Translation putting the ankle midpoint above the origin and the lowest
    sole vertex on the ground plane ``z = ground_height``."""
    verts, joints = forward_batch(model, np.zeros((1, 3)), np.asarray(R)[None], np.asarray(theta)[None], beta)
    ank = _ankle_indices(model)
    mid = joints[0, ank].mean(0)
    sole = verts[0, np.concatenate([model.foot_left, model.foot_right]), 2].min()
    return np.array([-mid[0], -mid[1], ground_height - sole])


def _ankle_indices(model: BodyModel) -> list[int]:
    names = list(model.joint_names)
    if "L_ankle" in names and "R_ankle" in names:
        return [names.index("L_ankle"), names.index("R_ankle")]
    return [7, 8]


def estimate_head_offset(model: BodyModel, motion_world: MotionSequence, lidar_positions: np.ndarray,
                         quiet_seconds: float = 1.0, speed_warning: float = 0.05) -> np.ndarray:
    """Sensor-to-head offset in the head frame from the quiet start of the capture.

    During the first ``quiet_seconds`` the body is placed with
    :func:`ground_placement` (at scan 0) plus its IMU displacement, and the
    offset ``R_H^T (J_head - T_lidar)`` is averaged over the quiet frames.
    """
    n = max(1, min(motion_world.n_frames, int(round(quiet_seconds * motion_world.fps))))
    T0 = ground_placement(model, motion_world.R[0], motion_world.theta[0], motion_world.beta)
    T = T0 + motion_world.T[:n] - motion_world.T[0]
    _, joints = forward_batch(model, T, motion_world.R[:n], motion_world.theta[:n], motion_world.beta)
    head = joints[:, model.head_joint]
    if n > 1:
        speed = np.linalg.norm(np.diff(head, axis=0), axis=1).max() * motion_world.fps
        if speed > speed_warning:
            warnings.warn(f"head moves at {speed:.3f} m/s during the quiet period", RuntimeWarning)
    rh = head_rotation(model, motion_world.R[:n], motion_world.theta[:n])
    offs = np.einsum("fba,fb->fa", rh, head - lidar_positions[:n])
    return offs.mean(0)


def first_person_translation(model: BodyModel, motion_world: MotionSequence, lidar_positions: np.ndarray,
                             t_hl: np.ndarray) -> np.ndarray:
    """Body translation per frame from the sensor position:
    pelvis = T_lidar + R_H t_hl + (pelvis - head)."""
    zero = np.zeros_like(motion_world.T)
    _, joints = forward_batch(model, zero, motion_world.R, motion_world.theta, motion_world.beta)
    t_ph = joints[:, 0] - joints[:, model.head_joint]
    rh = head_rotation(model, motion_world.R, motion_world.theta)
    pelvis = lidar_positions + np.einsum("fab,b->fa", rh, t_hl) + t_ph
    return pelvis - joints[:, 0]


def localize_first_person(model: BodyModel, imu_synced: MotionSequence, lidar_positions: np.ndarray,
                          R_WI: np.ndarray, config: LocalizationConfig | None = None,
                          t_hl: np.ndarray | None = None) -> FirstPersonResult:
    """World pose track of the sensor wearer.

    ``imu_synced`` is the IMU track resampled at the LiDAR timestamps (IMU
    frame); ``lidar_positions`` the world sensor positions. Up to
    ``config.rounds`` heading refinements are made, stopping once the
    correction falls below ``config.yaw_tolerance_deg``.
    """
    cfg = config or LocalizationConfig()
    rwi = np.asarray(R_WI, float)
    if rwi.shape == (3, 3):
        rwi = np.block([[rwi, np.zeros((3, 1))], [np.zeros((1, 3)), np.ones((1, 1))]])
    fixed_offset = t_hl is not None
    history = []
    for _ in range(max(1, cfg.rounds)):
        world = imu_to_world(imu_synced, rwi)
        offset = t_hl if fixed_offset else estimate_head_offset(
            model, world, lidar_positions, cfg.quiet_seconds, cfg.quiet_speed_warning)
        T = first_person_translation(model, world, lidar_positions, offset)
        new = refine_world_rotation(world.T, T, rwi)
        step = np.degrees(abs(yaw_angle(new[:3, :3] @ rwi[:3, :3].T)))
        history.append(step)
        rwi = new
        if step < cfg.yaw_tolerance_deg:
            break
    world = imu_to_world(imu_synced, rwi)
    offset = t_hl if fixed_offset else estimate_head_offset(
        model, world, lidar_positions, cfg.quiet_seconds, cfg.quiet_speed_warning)
    world.T = first_person_translation(model, world, lidar_positions, offset)
    return FirstPersonResult(world, rwi, np.asarray(offset, float), history)


def body_box_centers(model: BodyModel, motion_world: MotionSequence, yaws: np.ndarray) -> np.ndarray:
    """Centre of each posed body's extent in a box frame of heading ``yaw``,
    relative to the translation T (i.e. computed with T = 0)."""
    verts, _ = forward_batch(model, np.zeros_like(motion_world.T), motion_world.R, motion_world.theta,
                             motion_world.beta)
    c, s = np.cos(yaws)[:, None], np.sin(yaws)[:, None]
    x = c * verts[..., 0] + s * verts[..., 1]
    y = -s * verts[..., 0] + c * verts[..., 1]
    mx = (x.max(1) + x.min(1)) / 2
    my = (y.max(1) + y.min(1)) / 2
    mz = (verts[..., 2].max(1) + verts[..., 2].min(1)) / 2
    return np.stack([c[:, 0] * mx - s[:, 0] * my, s[:, 0] * mx + c[:, 0] * my, mz], axis=1)


def body_headings(motion_world: MotionSequence, forward_axis=np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """Heading (rad about +Z) of the body's forward axis per frame."""
    from .rotations import rodrigues
    fwd = rodrigues(motion_world.R) @ forward_axis
    return np.arctan2(fwd[:, 1], fwd[:, 0])


def _horizontal(d: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(d)[..., :2], axis=-1)


def _associate(boxes: list[list[Box]], deltas: np.ndarray, start: int, init_center: np.ndarray,
               clouds: list[np.ndarray], cfg: LocalizationConfig):
    """Forward gated association from ``start``; returns centers, visibility, selection."""
    n = len(boxes)
    centers = np.zeros((n, 3))
    visible = np.zeros(n, bool)
    selected = np.full(n, -1, np.int64)
    crops: list = [None] * n
    c = init_center.copy()
    for k in range(start, n):
        pred = c if k == start else c + deltas[k]
        best, best_d = -1, np.inf
        for bi, b in enumerate(boxes[k]):
            d = _horizontal(b.center - pred)
            if d <= cfg.gate_radius and d < best_d:
                best, best_d = bi, d
        c = pred
        if best >= 0:
            box = boxes[k][best]
            pts = clouds[k]
            crop = pts[box.contains(pts)] if pts is not None and len(pts) else np.zeros((0, 3))
            selected[k] = best
            if len(crop) >= cfg.min_crop_points:
                visible[k] = True
                crops[k] = crop
                c = box.center.copy()
        centers[k] = c
    return centers, visible, selected, crops


def _vote_initial_box(boxes: list[list[Box]], deltas: np.ndarray, cfg: LocalizationConfig) -> tuple[int, int]:
    """Pick the first-frame detection whose IMU-propagated path keeps meeting detections."""
    first = next((k for k, b in enumerate(boxes) if b), None)
    if first is None:
        raise LocalizationError("no detection boxes in the sequence")
    horizon = min(len(boxes), first + cfg.init_vote_frames)
    best, best_score = 0, (-1, 0.0)
    for bi, b0 in enumerate(boxes[first]):
        c = b0.center.copy()
        hits, err = 0, 0.0
        for k in range(first + 1, horizon):
            c = c + deltas[k]
            ds = [_horizontal(b.center - c) for b in boxes[k]]
            if ds and min(ds) <= cfg.gate_radius:
                j = int(np.argmin(ds))
                hits += 1
                err += ds[j]
                c = boxes[k][j].center.copy()
        score = (hits, -err)
        if score > best_score:
            best, best_score = bi, score
    return first, best


def _fill_gaps(values: np.ndarray, visible: np.ndarray, deltas: np.ndarray, start: int) -> np.ndarray:
    """Bridge non-visible runs with IMU displacements, spreading the closing
    error linearly across each run; leading and trailing runs are propagated."""
    out = values.copy()
    n = len(out)
    vis = np.flatnonzero(visible)
    if vis.size == 0:
        return out
    for k in range(vis[0] - 1, -1, -1):
        out[k] = out[k + 1] - deltas[k + 1]
    for a, b in zip(vis[:-1], vis[1:]):
        if b - a <= 1:
            continue
        pred = out[a] + np.cumsum(deltas[a + 1:b + 1], axis=0)
        err = out[b] - pred[-1]
        w = (np.arange(1, b - a + 1) / (b - a))[:, None]
        out[a + 1:b] = (pred + w * err)[:-1]
    for k in range(vis[-1] + 1, n):
        out[k] = out[k - 1] + deltas[k]
    return out


def _icp_corrections(model: BodyModel, motion: MotionSequence, T: np.ndarray, crops: list,
                     visible: np.ndarray, lidar_positions: np.ndarray, lidar_rotations: np.ndarray | None,
                     sensor: LidarSpec, cfg: LocalizationConfig) -> np.ndarray:
    """Per-frame translation that registers the sensor-observable body vertices to the crop."""
    corr = np.zeros_like(T)
    idx = np.flatnonzero(visible)
    if idx.size == 0:
        return corr
    verts, _ = forward_batch(model, T[idx], motion.R[idx], motion.theta[idx], motion.beta)
    for v, k in zip(verts, idx):
        rot = np.eye(3) if lidar_rotations is None else lidar_rotations[k]
        src = v[observable_vertices(v, lidar_positions[k], rot, sensor, cfg.hpr_radius_exponent)]
        if len(src) < 3:
            continue
        res = icp_rigid(src, SpatialIndex(crops[k]), cfg.icp_max_iterations, reject_radius=cfg.icp_reject_radius)
        c = src.mean(0)
        corr[k] = res.rotation @ c + res.translation - c
    return corr


def localize_second_person(model: BodyModel, imu_synced: MotionSequence, boxes: list[list[Box]],
                           clouds_world: list[np.ndarray], lidar_positions: np.ndarray, R_WI: np.ndarray,
                           config: LocalizationConfig | None = None, lidar_rotations: np.ndarray | None = None,
                           sensor: LidarSpec | None = None) -> SecondPersonResult:
    """World pose track of a person seen by the LiDAR.

    Args:
        imu_synced: IMU track at LiDAR timestamps (IMU frame).
        boxes: per frame, the detection boxes (world frame).
        clouds_world: per frame, the scan points in the world frame.
        lidar_positions: (n, 3) world sensor positions.
        R_WI: initial IMU-to-world transform.
        lidar_rotations: (n, 3, 3) world sensor orientations (identity when omitted).
        sensor: beam layout; only body vertices inside its field of view take part in ICP.
    """
    sensor = sensor or LidarSpec()
    cfg = config or LocalizationConfig()
    n = imu_synced.n_frames
    if len(boxes) != n or len(clouds_world) != n:
        raise LocalizationError("boxes and clouds must have one entry per frame")
    rwi = np.asarray(R_WI, float)
    if rwi.shape == (3, 3):
        rwi = np.block([[rwi, np.zeros((3, 1))], [np.zeros((1, 3)), np.ones((1, 1))]])
    history = []
    result = None
    for round_i in range(max(1, cfg.rounds)):
        world = imu_to_world(imu_synced, rwi)
        deltas = np.vstack([np.zeros((1, 3)), np.diff(world.T, axis=0)])
        first, b0 = _vote_initial_box(boxes, deltas, cfg)
        centers, visible, selected, crops = _associate(boxes, deltas, first, boxes[first][b0].center, clouds_world, cfg)
        if not visible.any():
            raise LocalizationError("the tracked person is never visible")
        yaws = np.array([boxes[k][selected[k]].yaw if selected[k] >= 0 else np.nan for k in range(n)])
        yaws = np.where(np.isnan(yaws), body_headings(world), yaws)
        # the box centre moves against the pelvis with the gait, so gaps are bridged on T
        T = _fill_gaps(centers - body_box_centers(model, world, yaws), visible, deltas, first)
        corr = _icp_corrections(model, world, T, crops, visible, lidar_positions, lidar_rotations, sensor, cfg)
        corr = _fill_gaps(corr, visible, np.zeros_like(corr), first)
        T = T + corr
        world.T = T
        result = (world, crops, visible, selected, rwi)
        new = refine_world_rotation(imu_to_world(imu_synced, rwi).T, T, rwi)
        step = np.degrees(abs(yaw_angle(new[:3, :3] @ rwi[:3, :3].T)))
        history.append(step)
        log.debug("second-person round %d: heading step %.4f deg", round_i, step)
        if step < cfg.yaw_tolerance_deg:
            break
        rwi = new
    world, crops, visible, selected, rwi = result
    return SecondPersonResult(world, rwi, crops, visible, selected, history)

"""Evaluation metrics for recovered motions.

All distances are reported in millimetres as means of unsquared per-item
distances; ACC is in m/s^2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .body_model import STABLE_FOOT_THRESHOLD, BodyModel, MotionSequence, forward_motion, stable_feet
from .geometry.raycast import LidarSpec
from .geometry.scene import SceneMap
from .geometry.spatial import SpatialIndex
from .geometry.visibility import observable_vertices

MM = 1000.0


@dataclass
class MetricReport:
    """Metric values of one motion; optional entries are None when not applicable."""

    cd_foot: float | None = None
    fse: float | None = None
    acc: float | None = None
    gle: float | None = None
    cd_v2p: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return asdict(self)

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if v is not None and not v >= 0:
                raise ValueError(f"metric {k} must be >= 0, got {v}")


def _foot(model: BodyModel, label: str | None) -> np.ndarray | None:
    return {"left": model.foot_left, "right": model.foot_right}.get(label)


def _vertices(motion: MotionSequence, model: BodyModel, vertices: np.ndarray | None) -> np.ndarray:
    return forward_motion(model, motion)[0] if vertices is None else np.asarray(vertices, float)


def fse_series(vertices: np.ndarray, model: BodyModel, threshold: float = STABLE_FOOT_THRESHOLD) -> np.ndarray:
    """Per frame pair: displacement (m) of the stable foot's centroid, 0 without a stable foot."""
    labels = stable_feet(vertices, model.foot_left, model.foot_right, threshold)
    out = np.zeros(len(labels))
    for i, lab in enumerate(labels):
        idx = _foot(model, lab)
        if idx is not None:
            out[i] = np.linalg.norm(vertices[i + 1, idx].mean(0) - vertices[i, idx].mean(0))
    return out


def cd_foot_series(vertices: np.ndarray, model: BodyModel, scene: SceneMap,
                   threshold: float = STABLE_FOOT_THRESHOLD) -> np.ndarray:
    """Per frame: mean distance (m) of stable-foot vertices to the ground, NaN without a stable foot.

    Frame ``j`` uses the stable foot of the pair ``(j-1, j)``; frame 0 that of ``(0, 1)``.
    """
    labels = stable_feet(vertices, model.foot_left, model.foot_right, threshold)
    per_frame = [labels[0]] + list(labels)
    out = np.full(len(vertices), np.nan)
    rows, idxs = [], []
    for j, lab in enumerate(per_frame):
        idx = _foot(model, lab)
        if idx is not None:
            rows.append(j)
            idxs.append(idx)
    if rows:
        q = np.concatenate([vertices[j, idx] for j, idx in zip(rows, idxs)])
        _, _, d2 = scene.closest(q, ground_only=True)
        d = np.sqrt(d2)
        pos = 0
        for j, idx in zip(rows, idxs):
            out[j] = d[pos:pos + idx.size].mean()
            pos += idx.size
    return out


def acc_series(T: np.ndarray, dt: float) -> np.ndarray:
    """Per interior frame: squared pelvis second difference divided by dt^2."""
    T = np.asarray(T, float)
    d = T[2:] - 2 * T[1:-1] + T[:-2]
    return np.sum(d * d, axis=1) / dt**2


def metric_cd_foot(motion: MotionSequence, model: BodyModel, scene: SceneMap,
                   vertices: np.ndarray | None = None) -> float | None:
    """Mean stable-foot distance to the ground in mm over frames with a stable foot."""
    s = cd_foot_series(_vertices(motion, model, vertices), model, scene)
    s = s[~np.isnan(s)]
    return float(s.mean() * MM) if s.size else None


def metric_fse(motion: MotionSequence, model: BodyModel, vertices: np.ndarray | None = None) -> float:
    """Mean stable-foot slide per frame pair in mm (pairs without a stable foot count as 0)."""
    return float(fse_series(_vertices(motion, model, vertices), model).mean() * MM)


def metric_acc(motion: MotionSequence) -> float:
    """Pelvis acceleration: sum of squared second differences over (n - 2) dt^2."""
    if motion.n_frames < 3:
        raise ValueError("acceleration needs at least three frames")
    dt = 1.0 / motion.fps
    T = motion.T
    d = T[2:] - 2 * T[1:-1] + T[:-2]
    return float(np.sum(d * d) / ((motion.n_frames - 2) * dt * dt))


def metric_gle(motion: MotionSequence, model: BodyModel, start_equals_end: bool = True,
               vertices: np.ndarray | None = None) -> float | None:
    """Loop-closure error in mm: distance between the mean foot-vertex position
    of the first and the last frame. None when the protocol flag is off."""
    if not start_equals_end:
        return None
    feet = np.concatenate([model.foot_left, model.foot_right])
    if vertices is None:
        ends = motion.slice(0, 1), motion.slice(motion.n_frames - 1, motion.n_frames)
        first = forward_motion(model, ends[0])[0][0]
        last = forward_motion(model, ends[1])[0][0]
    else:
        first, last = vertices[0], vertices[-1]
    return float(np.linalg.norm(first[feet].mean(0) - last[feet].mean(0)) * MM)


def cd_v2p_series(vertices: np.ndarray, crops: list[np.ndarray], visible: np.ndarray,
                  lidar_positions: np.ndarray, lidar_rotations: np.ndarray | None, sensor: LidarSpec) -> np.ndarray:
    """Per frame: mean distance (m) from observable vertices to the crop, NaN when not evaluable."""
    out = np.full(len(vertices), np.nan)
    for i in range(len(vertices)):
        if not visible[i] or len(crops[i]) == 0:
            continue
        rot = np.eye(3) if lidar_rotations is None else lidar_rotations[i]
        idx = observable_vertices(vertices[i], lidar_positions[i], rot, sensor)
        if idx.size == 0:
            continue
        _, d2 = SpatialIndex(crops[i]).query(vertices[i][idx])
        out[i] = np.sqrt(d2).mean()
    return out


def metric_cd_v2p(motion: MotionSequence, model: BodyModel, crops: list[np.ndarray], visible: np.ndarray,
                  lidar_positions: np.ndarray, lidar_rotations: np.ndarray | None = None,
                  sensor: LidarSpec | None = None, vertices: np.ndarray | None = None) -> float | None:
    """Mean observable-vertex-to-crop distance in mm over evaluable frames; None if there are none."""
    s = cd_v2p_series(_vertices(motion, model, vertices), crops, np.asarray(visible, bool),
                      np.asarray(lidar_positions, float), lidar_rotations, sensor or LidarSpec())
    s = s[~np.isnan(s)]
    return float(s.mean() * MM) if s.size else None


def evaluate_motion(motion: MotionSequence, model: BodyModel, scene: SceneMap | None = None,
                    start_equals_end: bool = False, crops: list[np.ndarray] | None = None,
                    visible: np.ndarray | None = None, lidar_positions: np.ndarray | None = None,
                    lidar_rotations: np.ndarray | None = None, sensor: LidarSpec | None = None) -> MetricReport:
    """All applicable metrics of one motion (GLE for a loop-closing wearer,
    CD_v2p when crops are given)."""
    verts = forward_motion(model, motion)[0]
    report = MetricReport(
        cd_foot=metric_cd_foot(motion, model, scene, verts) if scene is not None else None,
        fse=metric_fse(motion, model, verts),
        acc=metric_acc(motion) if motion.n_frames >= 3 else None,
        gle=metric_gle(motion, model, start_equals_end, verts),
    )
    if crops is not None:
        report.cd_v2p = metric_cd_v2p(motion, model, crops, visible, lidar_positions, lidar_rotations, sensor, verts)
    return report


def format_report(rows: dict[str, MetricReport]) -> str:
    """Aligned text table, one row per named report."""
    cols = ("cd_foot", "fse", "acc", "gle", "cd_v2p")
    head = f"{'name':<20}" + "".join(f"{c:>12}" for c in cols)
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        d = r.as_dict()
        lines.append(f"{name:<20}" + "".join(f"{'-' if d[c] is None else format(d[c], '.3f'):>12}" for c in cols))
    return "\n".join(lines)

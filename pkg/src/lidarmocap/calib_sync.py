"""Sensor-to-world calibration and LiDAR/IMU time alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import yaml
from scipy.optimize import minimize_scalar

from .body_model import MotionSequence
from .errors import CalibrationError, SyncError
from .geometry.registration import ransac_plane
from .rotations import matrix_to_rotvec, rodrigues, slerp_rotvec, unwrap_rotvec_sequence

GRAVITY = 9.8
PEAK_WINDOW = 0.15
SAMPLE_SNAP = 1e-9

# body frame (+Y up, +Z forward, +X left) to world (+X right, +Y forward, +Z up)
R_WI = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class CropHint:
    """Axis-aligned box selecting the points of one plane in a scan, plus the
    rough direction its normal should point to (used to fix the sign)."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    direction: tuple[float, float, float]

    def select(self, points: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return points[np.all((points >= lo) & (points <= hi), axis=1)]


@dataclass(eq=False)
class Calibration:
    """4x4 LiDAR-to-world and IMU-to-world transforms plus the inputs that fixed them."""

    R_WL: np.ndarray
    R_WI: np.ndarray
    height: float
    marker_offset: float

    def __post_init__(self) -> None:
        self.R_WL = np.asarray(self.R_WL, dtype=np.float64)
        self.R_WI = np.asarray(self.R_WI, dtype=np.float64)
        if self.R_WL.shape != (4, 4) or self.R_WI.shape != (4, 4):
            raise CalibrationError("R_WL and R_WI must be 4x4")
        rot = self.R_WL[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) < 0:
            raise CalibrationError("R_WL rotation block is not a rotation")
        if not np.array_equal(self.R_WI, imu_to_world_transform()):
            raise CalibrationError("R_WI must equal the fixed IMU-to-world axis permutation")

    def to_yaml(self) -> str:
        body = yaml.safe_dump(
            {
                "R_WL": np.asarray(self.R_WL).tolist(),
                "R_WI": np.asarray(self.R_WI).tolist(),
                "height": float(self.height),
                "marker_offset": float(self.marker_offset),
            },
            sort_keys=False,
        )
        return (
            "# R_WL: LiDAR map frame -> world (rows: right, forward, up; translation = sensor position)\n"
            "# R_WI: IMU frame -> world\n"
            "# height: sensor height above the ground at scan 0 (m)\n"
            "# marker_offset: forward offset of the sensor from the world origin (m)\n" + body
        )

    @classmethod
    def from_yaml(cls, text: str) -> "Calibration":
        d = yaml.safe_load(text)
        try:
            return cls(np.array(d["R_WL"], float), np.array(d["R_WI"], float), float(d["height"]),
                       float(d["marker_offset"]))
        except (KeyError, TypeError) as exc:
            raise CalibrationError(f"malformed calibration: {exc}") from exc


def imu_to_world_transform(rotation: np.ndarray = R_WI) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = rotation
    return out


def build_R_WL(scan: np.ndarray, ground_hint: CropHint, marker_hint: CropHint, height: float,
               marker_offset: float = 0.2, threshold: float = 0.02, iterations: int = 500,
               seed: int = 0, min_points: int = 30, min_angle_deg: float = 10.0) -> np.ndarray:
    """LiDAR-to-world transform from the ground and a vertical marker plane.

    With ``g`` the ground normal (up), ``m`` the marker normal (forward) and
    ``s = m x g`` (right), the rotation rows are ``(s, m, g)``, projected onto
    the nearest rotation matrix. The translation places the sensor at
    ``(0, marker_offset, height)``.

    Raises:
        CalibrationError: too few points in a hint box, or the planes are
            closer than ``min_angle_deg`` to parallel.
    """
    scan = np.asarray(scan, dtype=np.float64).reshape(-1, 3)
    planes = []
    for name, hint in (("ground", ground_hint), ("marker", marker_hint)):
        pts = hint.select(scan)
        if len(pts) < min_points:
            raise CalibrationError(f"{name} hint selects {len(pts)} points (< {min_points})")
        try:
            fit = ransac_plane(pts, threshold, iterations, seed, orient=np.asarray(hint.direction, float))
        except ValueError as exc:
            raise CalibrationError(f"{name} plane fit failed: {exc}") from exc
        planes.append(fit.normal)
    g, m = planes
    cos = abs(float(g @ m))
    if cos > np.cos(np.radians(min_angle_deg)):
        raise CalibrationError("ground and marker planes are nearly parallel")
    out = np.eye(4)
    out[:3, :3] = nearest_rotation(np.stack([np.cross(m, g), m, g]))
    out[:3, 3] = (0.0, marker_offset, height)
    return out


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Closest proper rotation in the Frobenius norm (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def jump_peak_time(times: np.ndarray, heights: np.ndarray, window: float = PEAK_WINDOW,
                   g: float = GRAVITY, grid: int = 61) -> float:
    """Apex time of a jump by fitting a free-fall parabola around the highest sample.

    The cost ``sum |0.5 g (t - t_p)^2 - (h_apex - h)|`` over samples within
    ``window`` seconds of the discrete maximum is minimised over ``t_p``; for a
    fixed ``t_p`` the best apex height is the median of
    ``h + 0.5 g (t - t_p)^2``. A grid search over the window is followed by a
    bounded scalar refinement around the best grid cell.
    """
    t = np.asarray(times, dtype=np.float64)
    h = np.asarray(heights, dtype=np.float64)
    if t.shape != h.shape or t.size < 3:
        raise SyncError("need at least three samples of equal-length time and height")
    i = int(np.argmax(h))
    if i == 0 or i == h.size - 1:
        raise SyncError("height track has no interior local maximum")
    sel = np.abs(t - t[i]) <= window + 1e-12
    ts, hs = t[sel], h[sel]
    if ts.size < 3:
        raise SyncError("too few samples around the peak")

    def cost(tp: float) -> float:
        drop = 0.5 * g * (ts - tp) ** 2
        apex = np.median(hs + drop)
        return float(np.abs(drop - (apex - hs)).sum())

    lo, hi = t[i] - window, t[i] + window
    cand = np.linspace(lo, hi, grid)
    costs = np.array([cost(c) for c in cand])
    k = int(np.argmin(costs))
    a, b = cand[max(k - 1, 0)], cand[min(k + 1, grid - 1)]
    res = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-7})
    return float(res.x) if res.fun <= costs[k] else float(cand[k])


def detect_jump_peaks(times: np.ndarray, heights: np.ndarray, n_peaks: int = 2,
                      min_separation: float = 2.0, window: float = PEAK_WINDOW) -> list[float]:
    """Apex times of the ``n_peaks`` highest jumps, sorted in time.

    Heights are taken relative to the median so slow trends do not matter.
    """
    t = np.asarray(times, float)
    h = np.asarray(heights, float) - np.median(heights)
    peaks: list[float] = []
    avail = np.ones(len(t), bool)
    for _ in range(n_peaks):
        if not avail.any():
            break
        i = int(np.flatnonzero(avail)[np.argmax(h[avail])])
        sel = np.abs(t - t[i]) <= 3 * window
        peaks.append(jump_peak_time(t[sel], h[sel], window))
        avail &= np.abs(t - t[i]) >= min_separation
    if len(peaks) < n_peaks:
        raise SyncError(f"found {len(peaks)} of {n_peaks} jump peaks")
    return sorted(peaks)


class ClockMap(NamedTuple):
    """``t_lidar = scale * t_imu + offset``."""

    scale: float
    offset: float

    def to_lidar(self, t_imu):
        return self.scale * np.asarray(t_imu) + self.offset

    def to_imu(self, t_lidar):
        return (np.asarray(t_lidar) - self.offset) / self.scale


def clock_map(imu_peaks: list[float], lidar_peaks: list[float]) -> ClockMap:
    """Offset from one peak pair; offset and rate from two or more (least squares)."""
    a = np.asarray(imu_peaks, float)
    b = np.asarray(lidar_peaks, float)
    if a.size == 0 or a.size != b.size:
        raise SyncError("need matching, non-empty peak lists")
    if a.size == 1:
        return ClockMap(1.0, float(b[0] - a[0]))
    scale, offset = np.polyfit(a, b, 1)
    if not scale > 0:
        raise SyncError("peak pairs imply a non-increasing clock map")
    return ClockMap(float(scale), float(offset))


def synchronize_and_resample(imu: MotionSequence, lidar_times: np.ndarray, clock: ClockMap,
                             ) -> tuple[MotionSequence, np.ndarray]:
    """Resample an IMU pose track at LiDAR timestamps.

    Translations are interpolated linearly and rotations (root and joints) by
    spherical interpolation. A LiDAR time within 1e-9 s of an IMU sample takes
    that sample unchanged. LiDAR times outside the IMU span are clamped to the
    nearest sample and flagged False in the returned validity mask.
    """
    lt = np.asarray(lidar_times, dtype=np.float64)
    u = (clock.to_imu(lt) - imu.start_time) * imu.fps
    n = imu.n_frames
    valid = (u >= -SAMPLE_SNAP * imu.fps) & (u <= n - 1 + SAMPLE_SNAP * imu.fps)
    u = np.clip(u, 0.0, n - 1)
    nearest = np.rint(u)
    snap = np.abs(u - nearest) <= SAMPLE_SNAP * imu.fps
    i0 = np.where(snap, nearest, np.floor(u)).astype(int)
    i0 = np.minimum(i0, n - 1)
    w = np.where(snap, 0.0, u - i0)
    i1 = np.minimum(i0 + 1, n - 1)
    T = imu.T[i0] + w[:, None] * (imu.T[i1] - imu.T[i0])
    R = slerp_rotvec(imu.R[i0], imu.R[i1], w)
    theta = slerp_rotvec(imu.theta[i0], imu.theta[i1], w[:, None])
    exact = w == 0.0
    R[exact] = imu.R[i0[exact]]
    theta[exact] = imu.theta[i0[exact]]
    fps = 1.0 / np.median(np.diff(lt)) if lt.size > 1 else imu.fps
    out = MotionSequence(T, unwrap_rotvec_sequence(R), theta, imu.beta.copy(), float(fps), float(lt[0]))
    return out, valid


def world_rotations(R_axis_angle: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Root orientations re-expressed after a frame change by ``rotation``."""
    return unwrap_rotvec_sequence(matrix_to_rotvec(rotation @ rodrigues(R_axis_angle)))

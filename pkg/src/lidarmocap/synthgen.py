"""Synthetic capture sessions with known ground truth.

A scenario has a sensor wearer and an optional second person walking a closed
rounded-rectangle loop (so start and end coincide), framed by two vertical
jumps used for clock alignment. Leg poses come from analytic two-link inverse
kinematics against planned footsteps, so stance feet are exactly static. The
session is observed by a head-mounted ray-cast LiDAR and by corrupted IMU
tracks (heading drift, translation random walk, terrain height removed, clock
offset), and the second person additionally by noisy detection boxes with
misses and false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModel, MotionSequence, forward_batch, head_rotation
from .calib_sync import R_WI, CropHint
from .geometry.raycast import LidarSpec, cast_rays
from .geometry.scene import PointCloudFrame, SceneMap
from .localization import Box
from .rotations import matrix_to_rotvec, rodrigues, rot_x, rot_z, unwrap_rotvec_sequence

GRAVITY = 9.8
SCENE_HALF_EXTENT = 60.0
MIN_CORNER_RADIUS = 0.6


@dataclass
class ScenarioSpec:
    """Parameters of a synthetic session (durations in seconds, lengths in metres)."""

    duration: float = 60.0
    seed: int = 0
    lidar_fps: float = 20.0
    imu_fps: float = 100.0
    walk_speed: float = 0.7
    stride_period: float = 1.0
    pelvis_height: float = 0.87
    foot_lateral: float = 0.1
    foot_lift: float = 0.06
    swing_clearance: float = 0.04
    jump_velocity: float = 2.2
    jump_scissor: float = 0.06  # fore/aft foot swing amplitude in flight
    stand_time: float = 1.0
    second_person: bool = True
    second_offset: tuple[float, float] = (3.5, 0.0)
    head_offset: tuple[float, float, float] = (0.0, -0.14, -0.03)
    # IMU corruption
    heading_drift_rate: float = 0.25  # deg/s
    heading_bias_deg: tuple[float, float] = (4.0, -6.0)
    translation_walk: float = 0.01  # m/sqrt(s)
    flat_ground: bool = True
    clock_offset: float = -0.25
    # LiDAR and detections
    lidar: LidarSpec = field(default_factory=LidarSpec)
    trajectory_noise: float = 0.0
    range_noise: float = 0.003
    dropout: float = 0.1
    roi_radius: float = 1.5
    box_miss_rate: float = 0.3
    false_positives: int = 3
    box_center_noise: float = 0.02
    box_size_noise: float = 0.01
    box_bottom_raise: float = 0.02
    obstacles: bool = True

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        rates = ("lidar_fps", "imu_fps", "heading_drift_rate", "translation_walk", "range_noise", "dropout",
                 "box_miss_rate", "false_positives", "box_center_noise", "box_size_noise", "trajectory_noise")
        for name in rates:
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lidar_fps == 0 or self.imu_fps == 0:
            raise ValueError("sampling rates must be positive")
        if self.dropout > 1 or self.box_miss_rate > 1:
            raise ValueError("dropout and box_miss_rate are probabilities")


@dataclass(eq=False)
class SynthBundle:
    """Everything one synthetic session produces, plus its ground truth.

    Observations use the sensor frames a real capture would: clouds are
    sensor-local (``"S"``), the trajectory, scene, boxes and calibration hints
    are in the map frame of scan 0 (``"L"``), IMU tracks in their own frame.
    """

    spec: ScenarioSpec
    model: BodyModel
    lidar_times: np.ndarray
    lidar_positions: np.ndarray
    lidar_rotations: np.ndarray
    clouds: list[PointCloudFrame]
    scene: SceneMap
    imu: dict[str, MotionSequence]
    boxes: list[list[Box]]
    height: float
    marker_offset: float
    ground_hint: CropHint
    marker_hint: CropHint
    truth: dict[str, MotionSequence]
    true_box: np.ndarray
    R_WL: np.ndarray
    t_hl: np.ndarray
    stance: dict[str, np.ndarray]
    scene_world: SceneMap


class LoopPath:
    """Closed rounded rectangle traversed clockwise (turning right), starting at
    the origin on its left edge heading +Y."""

    def __init__(self, width: float, length: float, radius: float):
        self.w, self.l, self.r = width, length, radius
        sx, sy = width - 2 * radius, length - 2 * radius
        self.segments = []  # (kind, length, params)
        half = sy / 2
        # left edge upper half, corner, top, corner, right, corner, bottom, corner, left lower half
        self._pieces = [
            ("line", half, np.array([0.0, 0.0]), np.pi / 2),
            ("arc", np.pi / 2 * radius, np.array([radius, half]), np.pi),
            ("line", sx, np.array([radius, half + radius]), 0.0),
            ("arc", np.pi / 2 * radius, np.array([radius + sx, half]), np.pi / 2),
            ("line", sy, np.array([2 * radius + sx, half]), -np.pi / 2),
            ("arc", np.pi / 2 * radius, np.array([radius + sx, -half]), 0.0),
            ("line", sx, np.array([radius + sx, -half - radius]), np.pi),
            ("arc", np.pi / 2 * radius, np.array([radius, -half]), -np.pi / 2),
            ("line", half, np.array([0.0, -half]), np.pi / 2),
        ]
        self.lengths = np.array([p[1] for p in self._pieces])
        self.cum = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.perimeter = float(self.cum[-1])

    def at(self, s: float) -> tuple[np.ndarray, float]:
        """Point (x, y) and heading (rad) at arc length ``s`` (clamped to the loop)."""
        s = float(np.clip(s, 0.0, self.perimeter))
        i = int(min(np.searchsorted(self.cum, s, side="right") - 1, len(self._pieces) - 1))
        kind, length, p, a = self._pieces[i]
        u = s - self.cum[i]
        if kind == "line":
            d = np.array([np.cos(a), np.sin(a)])
            return p + u * d, a
        # arc: p is the centre, a the start polar angle, clockwise sweep
        phi = a - u / self.r
        return p + self.r * np.array([np.cos(phi), np.sin(phi)]), phi - np.pi / 2

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.l / 2
        return np.array([0.0, -half]), np.array([self.w, half])


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class GaitProgram:
    """Continuous-time body motion: stand, jump, stand, walk the loop, stand,
    jump, stand. Evaluated at arbitrary times by :meth:`pose_at`."""

    def __init__(self, model: BodyModel, spec: ScenarioSpec, origin: np.ndarray, phase: float = 0.0):
        self.model = model
        self.spec = spec
        self.origin = np.asarray(origin, float)
        rest = model.rest_joints()
        self.rest = rest
        self.flight = 2 * spec.jump_velocity / GRAVITY
        st = spec.stand_time
        self.t_jump1 = st
        self.t_walk0 = st + self.flight + st
        fixed = 2 * st + 2 * (self.flight + st)
        self.walk_time = spec.duration - fixed
        if self.walk_time < 4 * spec.stride_period:
            raise ValueError("scenario too short for the stand/jump program")
        self.t_walk1 = self.t_walk0 + self.walk_time
        self.t_jump2 = self.t_walk1 + st
        self.end = spec.duration
        self.ramp = 1.0
        # path sized so the loop takes the walking time at the nominal speed
        mean_factor = 1.0 - self.ramp / self.walk_time
        perimeter = spec.walk_speed * self.walk_time * mean_factor
        width = perimeter / (2 + 2 * 1.4 - 8 * 0.3 + 2 * np.pi * 0.3)
        if 0.3 * width < MIN_CORNER_RADIUS:
            raise ValueError(f"walking loop too tight (corner radius {0.3 * width:.2f} m < {MIN_CORNER_RADIUS} m): "
                             "the legs would collide in the turns; use a longer duration")
        self.path = LoopPath(width, 1.4 * width, 0.3 * width)
        self._build_arc_length()
        self._plan_steps(phase)

    # arc length over walking time with smooth start/stop
    def _build_arc_length(self) -> None:
        t = np.linspace(0.0, self.walk_time, int(self.walk_time * 1000) + 1)
        v = np.ones_like(t)
        up = t < self.ramp
        dn = t > self.walk_time - self.ramp
        v[up] = 0.5 * (1 - np.cos(np.pi * t[up] / self.ramp))
        v[dn] = 0.5 * (1 - np.cos(np.pi * (self.walk_time - t[dn]) / self.ramp))
        s = np.concatenate([[0.0], np.cumsum((v[1:] + v[:-1]) / 2 * np.diff(t))])
        self._t_grid = t
        self._s_grid = s * self.path.perimeter / s[-1]

    def arc(self, t_walk: float) -> float:
        return float(np.interp(t_walk, self._t_grid, self._s_grid))

    def _plant(self, s: float, side: float) -> np.ndarray:
        p, h = self.path.at(s)
        left = np.array([-np.sin(h), np.cos(h)])
        q = p + side * self.spec.foot_lateral * left + self.origin
        return np.array([q[0], q[1], h])

    def _plan_steps(self, phase: float) -> None:
        """Swing intervals per foot with their start and end plants."""
        P = self.spec.stride_period
        n_cycles = int(np.floor(self.walk_time / P))
        self.steps = {}
        for name, side, offset in (("left", 1.0, 0.1), ("right", -1.0, 0.6)):
            swings = []
            plant = self._plant(0.0, side)
            for c in range(n_cycles):
                ts = self.t_walk0 + c * P + ((offset + phase) % P)
                te = ts + 0.4 * P
                if te > self.t_walk1 - 1e-9:
                    break
                s_target = min(self.arc(te - self.t_walk0 + 0.3 * P), self.path.perimeter)
                if c == n_cycles - 1 or te + P > self.t_walk1:
                    s_target = self.path.perimeter
                new = self._plant(s_target, side)
                if np.linalg.norm(new[:2] - plant[:2]) > 1e-6 or abs(_wrap(new[2] - plant[2])) > 1e-6:
                    swings.append((ts, te, plant, new))
                    plant = new
            final = self._plant(self.path.perimeter, side)
            if np.linalg.norm(final[:2] - plant[:2]) > 1e-9:
                ts = swings[-1][1] + 0.1 if swings else self.t_walk1 - 0.5
                swings.append((ts, ts + 0.4 * P, plant, final))
            self.steps[name] = (side, swings)

    def _flight_fraction(self, t: float) -> float | None:
        for tj in (self.t_jump1, self.t_jump2):
            tau = t - tj
            if 0.0 < tau < self.flight:
                return tau / self.flight
        return None

    def _jump_height(self, t: float) -> float:
        u = self._flight_fraction(t)
        if u is None:
            return 0.0
        tau = u * self.flight
        return self.spec.jump_velocity * tau - 0.5 * GRAVITY * tau * tau

    def apex_times(self) -> list[float]:
        v0 = self.spec.jump_velocity
        return [self.t_jump1 + v0 / GRAVITY, self.t_jump2 + v0 / GRAVITY]

    def foot_at(self, name: str, t: float) -> tuple[np.ndarray, float, bool]:
        """Ankle target (x, y, lift) and heading of a foot; flag if swinging."""
        side, swings = self.steps[name]
        plant = self._plant(0.0, side)
        for ts, te, a, b in swings:
            if t < ts:
                break
            if t < te:
                u = (t - ts) / (te - ts)
                h = a[2] + u * _wrap(b[2] - a[2])
                out = side * self.spec.swing_clearance * np.sin(np.pi * u)
                xy = a[:2] + u * (b[:2] - a[:2]) + out * np.array([-np.sin(h), np.cos(h)])
                return np.array([xy[0], xy[1], self.spec.foot_lift * np.sin(np.pi * u)]), h, True
            plant = b
        return np.array([plant[0], plant[1], 0.0]), plant[2], False

    def pelvis_at(self, t: float) -> tuple[np.ndarray, float]:
        if t <= self.t_walk0:
            s = 0.0
        elif t >= self.t_walk1:
            s = self.path.perimeter
        else:
            s = self.arc(t - self.t_walk0)
        p, h = self.path.at(s)
        z = self.spec.pelvis_height + self._jump_height(t)
        return np.array([p[0] + self.origin[0], p[1] + self.origin[1], z]), h

    def pose_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World (T, R, theta) of the body at time ``t``."""
        rest = self.rest
        pelvis, heading = self.pelvis_at(t)
        r_root = rot_z(heading - np.pi / 2) @ R_WI
        theta = np.zeros((23, 3))
        T = pelvis - rest[0]
        lift = self._jump_height(t)
        # the feet scissor in flight so no foot is ever near-static in the air, not even at the apex
        u = self._flight_fraction(t)
        scissor = 0.0 if u is None else self.spec.jump_scissor * np.sin(2 * np.pi * u)
        walking = self.t_walk0 < t < self.t_walk1
        swing_phase = 0.0
        if walking:
            swing_phase = np.sin(2 * np.pi * (t - self.t_walk0) / self.spec.stride_period)
            ramp = min(1.0, (t - self.t_walk0) / self.ramp, (self.t_walk1 - t) / self.ramp)
            swing_phase *= max(ramp, 0.0)
        for name, (hip, knee, ankle) in (("left", (1, 4, 7)), ("right", (2, 5, 8))):
            target, fheading, _ = self.foot_at(name, t)
            sole_to_ankle = rest[ankle, 1] - self._sole_height()
            fwd = np.array([np.cos(fheading), np.sin(fheading)]) * (scissor if name == "left" else -scissor)
            a_world = np.array([target[0] + fwd[0], target[1] + fwd[1], target[2] + lift + sole_to_ankle])
            hip_w = pelvis + r_root @ (rest[hip] - rest[0])
            f_rot = rot_z(fheading - np.pi / 2) @ R_WI
            lat = f_rot @ np.array([1.0, 0.0, 0.0])
            g_hip, kappa = _leg_ik(hip_w, a_world, rest[knee] - rest[hip], rest[ankle] - rest[knee], lat)
            theta[hip - 1] = matrix_to_rotvec(r_root.T @ g_hip)
            theta[knee - 1] = (kappa, 0.0, 0.0)
            g_knee = g_hip @ rot_x(kappa)
            theta[ankle - 1] = matrix_to_rotvec(g_knee.T @ f_rot)
        sign = 1.0
        for sh, el in ((16, 18), (17, 19)):
            theta[sh - 1] = (0.35 * sign * swing_phase, 0.0, 0.0)
            theta[el - 1] = (-0.3, 0.0, 0.0)
            sign = -sign
        return T, matrix_to_rotvec(r_root), theta

    def _sole_height(self) -> float:
        return float(self.model.template_vertices[self.model.foot_left, 1].mean())

    def sample(self, times: np.ndarray) -> MotionSequence:
        T, R, th = zip(*(self.pose_at(float(t)) for t in times))
        fps = 1.0 / (times[1] - times[0]) if len(times) > 1 else 1.0
        return MotionSequence(np.array(T), unwrap_rotvec_sequence(np.array(R)), np.array(th),
                              np.zeros(self.model.n_shape), fps, float(times[0]))


def _leg_ik(hip: np.ndarray, ankle: np.ndarray, thigh: np.ndarray, shin: np.ndarray,
            lateral: np.ndarray) -> tuple[np.ndarray, float]:
    """Global hip rotation and knee flexion placing the ankle at ``ankle``.

    The rest leg is straight along the body's down axis; the knee hinges about
    the body's lateral (+X) axis, which is aligned with ``lateral`` projected
    orthogonally to the hip-ankle line.
    """
    l1, l2 = np.linalg.norm(thigh), np.linalg.norm(shin)
    d = ankle - hip
    dist = np.clip(np.linalg.norm(d), abs(l1 - l2) + 1e-6, (l1 + l2) * 0.9999)
    cos_k = (dist**2 - l1**2 - l2**2) / (2 * l1 * l2)
    kappa = float(np.arccos(np.clip(cos_k, -1.0, 1.0)))
    e = thigh + rot_x(kappa) @ shin
    e_hat = e / np.linalg.norm(e)
    x_l = np.array([1.0, 0.0, 0.0])
    x_l = x_l - (x_l @ e_hat) * e_hat
    x_l /= np.linalg.norm(x_l)
    d_hat = d / np.linalg.norm(d)
    x_w = lateral - (lateral @ d_hat) * d_hat
    x_w /= np.linalg.norm(x_w)
    local = np.stack([e_hat, x_l, np.cross(e_hat, x_l)], axis=1)
    world = np.stack([d_hat, x_w, np.cross(d_hat, x_w)], axis=1)
    return world @ local.T, kappa


def _box_mesh(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    f = np.array(f)
    c = v.mean(0)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    flip = np.einsum("ij,ij->i", n, v[f].mean(1) - c) < 0
    f[flip] = f[flip][:, ::-1]
    return v, f


def build_scene(path: LoopPath, origin_offsets: list[np.ndarray], marker_distance: float,
                obstacles: bool = True) -> SceneMap:
    """World scene: a large ground quad, a marker board ahead of the start and
    optional obstacle boxes kept clear of the walking loops."""
    verts = [SCENE_HALF_EXTENT * np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]])]
    faces = [np.array([[0, 1, 2], [0, 2, 3]])]
    ground = [np.ones(2, bool)]
    parts = [((-1.0, marker_distance, 0.2), (1.0, marker_distance + 0.05, 2.2))]
    if obstacles:
        lo, hi = path.bounds()
        xs = [o[0] for o in origin_offsets]
        parts.append(((min(xs) - 2.6, -0.4, 0.0), (min(xs) - 1.8, 0.4, 0.9)))
        parts.append(((lo[0] + max(xs) / 2 - 0.5, lo[1] - 2.5, 0.0), (lo[0] + max(xs) / 2 + 0.5, lo[1] - 1.7, 1.2)))
    for plo, phi in parts:
        v, f = _box_mesh(plo, phi)
        faces.append(f + sum(len(x) for x in verts))
        verts.append(v)
        ground.append(np.zeros(len(f), bool))
    return SceneMap(vertices=np.vstack(verts), faces=np.vstack(faces), ground_mask=np.concatenate(ground), frame="W")


def imu_frame(heading_bias_deg: float) -> np.ndarray:
    """World-to-IMU axes: the body convention turned by a heading misalignment."""
    return rot_z(np.radians(heading_bias_deg)) @ R_WI


def imu_reference(truth: MotionSequence, heading_bias_deg: float = 0.0) -> MotionSequence:
    """Uncorrupted IMU track: the world truth re-expressed in the IMU frame,
    translation relative to the first sample."""
    frame = imu_frame(heading_bias_deg)
    T = (truth.T - truth.T[0]) @ frame
    R = unwrap_rotvec_sequence(matrix_to_rotvec(frame.T @ rodrigues(truth.R)))
    return MotionSequence(T, R, truth.theta.copy(), truth.beta.copy(), truth.fps, truth.start_time)


def corrupt_imu(truth: MotionSequence, spec: ScenarioSpec, heading_bias_deg: float,
                rng: np.random.Generator, terrain=None) -> MotionSequence:
    """IMU-frame track from a world truth track sampled at the IMU rate.

    Heading drifts linearly at ``spec.heading_drift_rate``; translation is
    integrated from drifted per-sample steps plus a horizontal random walk; with
    ``spec.flat_ground`` the terrain height under the body is removed. With all
    corruption off the result equals :func:`imu_reference`.
    """
    clean = spec.heading_drift_rate == 0 and spec.translation_walk == 0
    if clean and (not spec.flat_ground or terrain is None):
        return imu_reference(truth, heading_bias_deg)
    frame = imu_frame(heading_bias_deg)
    t = truth.timestamps - truth.start_time
    drift_m = np.stack([rot_z(a) for a in np.radians(spec.heading_drift_rate) * t])
    est_rot = drift_m @ rodrigues(truth.R)
    T = truth.T.copy()
    if spec.flat_ground and terrain is not None:
        T[:, 2] = T[:, 2] - terrain(T[:, :2])
    steps = np.einsum("fab,fb->fa", drift_m[1:], np.diff(T, axis=0))
    noise = rng.normal(0.0, spec.translation_walk * np.sqrt(1.0 / truth.fps), size=steps.shape)
    noise[:, 2] = 0.0
    est_T = np.vstack([np.zeros((1, 3)), np.cumsum(steps + noise, axis=0)])
    R_imu = unwrap_rotvec_sequence(matrix_to_rotvec(frame.T @ est_rot))
    return MotionSequence(est_T @ frame, R_imu, truth.theta.copy(), truth.beta.copy(), truth.fps,
                          truth.start_time)


def score_against_truth(result: MotionSequence, truth: MotionSequence, model: BodyModel | None = None
                        ) -> dict[str, float]:
    """Direct error statistics of a recovered track against ground truth.

    Returns the pelvis trajectory RMS (m), the RMS of per-joint rotation angle
    errors (rad) and, when ``model`` is given, the loop-closure error of the
    result in mm (mean foot position, first vs last frame).
    """
    if result.n_frames != truth.n_frames:
        raise ValueError(f"length mismatch: {result.n_frames} vs {truth.n_frames}")
    traj = float(np.sqrt(np.mean(np.sum((result.T - truth.T) ** 2, axis=1))))
    ang = np.linalg.norm(matrix_to_rotvec(
        np.swapaxes(rodrigues(truth.theta), -1, -2) @ rodrigues(result.theta)), axis=-1)
    out = {"trajectory_rms": traj, "joint_angle_rms": float(np.sqrt(np.mean(ang**2)))}
    if model is not None:
        from .metrics import metric_gle

        out["gle_mm"] = metric_gle(result, model)
    return out


def body_box(model: BodyModel, verts: np.ndarray, R: np.ndarray, raise_bottom: float = 0.0) -> Box:
    """Heading-aligned box around a posed body."""
    fwd = rodrigues(R) @ np.array([0.0, 0.0, 1.0])
    yaw = float(np.arctan2(fwd[1], fwd[0]))
    c, s = np.cos(yaw), np.sin(yaw)
    x = c * verts[:, 0] + s * verts[:, 1]
    y = -s * verts[:, 0] + c * verts[:, 1]
    z = verts[:, 2]
    lo = np.array([x.min(), y.min(), z.min() + raise_bottom])
    hi = np.array([x.max(), y.max(), z.max()])
    mid = (lo + hi) / 2
    center = np.array([c * mid[0] - s * mid[1], s * mid[0] + c * mid[1], mid[2]])
    return Box(center, hi - lo, yaw)


def generate(spec: ScenarioSpec, model: BodyModel) -> SynthBundle:
    """Simulate a session. Deterministic for a given ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    origins = [np.zeros(2)]
    if spec.second_person:
        origins.append(np.asarray(spec.second_offset, float))
    programs = [GaitProgram(model, spec, o, phase=0.5 * i) for i, o in enumerate(origins)]
    roles = ["wearer", "second"][: len(programs)]
    n_lidar = int(np.floor(spec.duration * spec.lidar_fps)) + 1
    lidar_times = np.arange(n_lidar) / spec.lidar_fps
    truth = {r: p.sample(lidar_times) for r, p in zip(roles, programs)}

    # head-mounted sensor: rigid offset from the head joint, level at scan 0
    t_hl = np.asarray(spec.head_offset, float)
    wearer = truth["wearer"]
    _, joints = forward_batch(model, wearer.T, wearer.R, wearer.theta)
    rh = head_rotation(model, wearer.R, wearer.theta)
    lidar_w = joints[:, model.head_joint] - np.einsum("fab,b->fa", rh, t_hl)
    rot_wl = rot_z(np.pi / 2)
    mount = rh[0].T @ rot_wl
    lidar_rot_w = rh @ mount
    if spec.trajectory_noise > 0:
        lidar_w = lidar_w + rng.normal(0.0, spec.trajectory_noise, lidar_w.shape)
    t_wl = lidar_w[0].copy()
    R_WL = np.eye(4)
    R_WL[:3, :3] = rot_wl
    R_WL[:3, 3] = t_wl

    lo, hi = programs[0].path.bounds()
    marker_distance = hi[1] + 1.5
    for o in origins:
        if np.any(np.abs(np.concatenate([lo + o, hi + o])) > SCENE_HALF_EXTENT - 5.0):
            raise ValueError("motion program leaves the scene bounds")
    scene_w = build_scene(programs[0].path, origins, marker_distance, spec.obstacles)

    # IMU tracks on their own clock: t_true = t_imu + clock_offset
    imu = {}
    t0 = -1.0 if spec.clock_offset > -1.0 else spec.clock_offset - 1.0
    n_imu = int(np.floor((spec.duration + 1.0 - t0) * spec.imu_fps)) + 1
    imu_true_times = t0 + np.arange(n_imu) / spec.imu_fps
    for i, (r, p) in enumerate(zip(roles, programs)):
        tr = p.sample(np.clip(imu_true_times, -1.0, spec.duration + 1.0))
        tr.fps = spec.imu_fps
        bias = spec.heading_bias_deg[i % len(spec.heading_bias_deg)]
        seq = corrupt_imu(tr, spec, bias, rng, terrain=lambda xy: np.zeros(len(xy)))
        seq.start_time = float(imu_true_times[0] - spec.clock_offset)
        imu[r] = seq

    # scans
    clouds: list[PointCloudFrame] = []
    boxes: list[list[Box]] = []
    true_box = np.full(n_lidar, -1, np.int64)
    second_verts = None
    if spec.second_person:
        s = truth["second"]
        second_verts, _ = forward_batch(model, s.T, s.R, s.theta)
    for k in range(n_lidar):
        verts, faces = scene_w.vertices, scene_w.faces
        frame_boxes: list[Box] = []
        centers = []
        if second_verts is not None:
            nv = len(verts)
            verts = np.vstack([verts, second_verts[k]])
            faces = np.vstack([faces, model.faces + nv])
            tb = body_box(model, second_verts[k], truth["second"].R[k], spec.box_bottom_raise)
            centers.append(tb.center)
            detected = rng.random() >= spec.box_miss_rate
            if detected:
                tb.center = tb.center + rng.normal(0.0, spec.box_center_noise, 3)
                tb.size = tb.size + rng.normal(0.0, spec.box_size_noise, 3)
                tb.score = float(rng.uniform(0.6, 1.0))
                frame_boxes.append(tb)
            for _ in range(spec.false_positives):
                for _try in range(100):
                    r = rng.uniform(3.0, 12.0)
                    a = rng.uniform(-np.pi, np.pi)
                    c = lidar_w[k, :2] + r * np.array([np.cos(a), np.sin(a)])
                    if np.linalg.norm(c - centers[0][:2]) >= 1.5:
                        break
                size = np.array([rng.uniform(0.3, 0.6), rng.uniform(0.4, 0.7), rng.uniform(1.4, 1.9)])
                fp = Box(np.array([c[0], c[1], size[2] / 2 + spec.box_bottom_raise]), size,
                         float(rng.uniform(-np.pi, np.pi)), float(rng.uniform(0.3, 0.9)))
                frame_boxes.append(fp)
                centers.append(fp.center)
            order = rng.permutation(len(frame_boxes))
            frame_boxes = [frame_boxes[i] for i in order]
            if detected:
                true_box[k] = int(np.flatnonzero(order == 0)[0])
        hits = cast_rays(verts, faces, lidar_w[k], lidar_rot_w[k], spec.lidar)
        pts = hits.points
        keep = rng.random(len(pts)) >= spec.dropout
        if k > 0:
            roi = np.zeros(len(pts), bool)
            for c in centers:
                roi |= np.linalg.norm(pts[:, :2] - c[:2], axis=1) <= spec.roi_radius
            keep &= roi
        else:
            keep[:] = True
        pts, ranges = pts[keep], hits.ranges[keep]
        if spec.range_noise > 0 and len(pts):
            dirs = (pts - lidar_w[k]) / ranges[:, None]
            pts = pts + dirs * rng.normal(0.0, spec.range_noise, len(pts))[:, None]
        local = (pts - lidar_w[k]) @ lidar_rot_w[k]
        clouds.append(PointCloudFrame(local, float(lidar_times[k]), "S", k))
        for b in frame_boxes:
            b.frame_id = k
        boxes.append(frame_boxes)

    # express map-frame quantities in L (scan-0 sensor frame)
    rot_lw = rot_wl.T

    def to_l(x):
        return (np.asarray(x) - t_wl) @ rot_wl

    lidar_l = to_l(lidar_w)
    lidar_rot_l = np.einsum("ab,fbc->fac", rot_lw, lidar_rot_w)
    scene_l = scene_w.transformed(rot_lw, -rot_lw @ t_wl, frame="L")
    yaw_wl = np.arctan2(rot_wl[1, 0], rot_wl[0, 0])
    for fb in boxes:
        for b in fb:
            b.center = to_l(b.center)
            b.yaw = float(_wrap(b.yaw - yaw_wl))
    h = float(t_wl[2])
    ground_hint = CropHint((-3.0, -3.0, -h - 0.3), (3.0, 3.0, -h + 0.3), (0.0, 0.0, 1.0))
    dist_l = marker_distance - t_wl[1]
    marker_hint = CropHint((dist_l - 0.3, -1.2, 0.3 - h), (dist_l + 0.3, 1.2, 2.1 - h), (1.0, 0.0, 0.0))

    stance = {}
    for r, p in zip(roles, programs):
        flags = np.array([[not p.foot_at(n, float(t))[2] and p._jump_height(float(t)) == 0.0
                           for n in ("left", "right")] for t in lidar_times])
        stance[r] = flags

    return SynthBundle(
        spec=spec, model=model, lidar_times=lidar_times, lidar_positions=lidar_l,
        lidar_rotations=lidar_rot_l, clouds=clouds, scene=scene_l, imu=imu, boxes=boxes,
        height=h, marker_offset=float(t_wl[1]), ground_hint=ground_hint, marker_hint=marker_hint,
        truth=truth, true_box=true_box, R_WL=R_WL, t_hl=t_hl, stance=stance, scene_world=scene_w,
    )

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from helpers import static_motion, synced_imu, toy_body
from lidarmocap.body_model import MotionSequence, forward_batch
from lidarmocap.calib_sync import R_WI
from lidarmocap.geometry.raycast import LidarSpec, cast_rays
from lidarmocap.losses import WindowContext, compute_terms
from lidarmocap.metrics import metric_fse
from lidarmocap.rotations import rodrigues
from lidarmocap.synthgen import ScenarioSpec, corrupt_imu, generate, imu_reference, score_against_truth

QUIET = dict(heading_drift_rate=0.0, translation_walk=0.0, flat_ground=False, heading_bias_deg=(0.0, 0.0))


def straight_walk(duration=30.0, fps=100.0, seed=0):
    """World-frame track at 1 m/s with a gently wandering heading."""
    rng = np.random.default_rng(seed)
    n = int(duration * fps) + 1
    t = np.arange(n) / fps
    T = np.stack([t, 0.1 * np.sin(t), np.full(n, 0.9)], axis=1)
    yaw = 0.2 * np.sin(0.3 * t) + rng.normal(0, 1e-3)
    R = Rotation.from_matrix(np.einsum("fab,bc->fac", Rotation.from_euler("z", yaw).as_matrix(), R_WI)).as_rotvec()
    return MotionSequence(T, R, np.zeros((n, 23, 3)), np.zeros(10), fps)


def bundles_equal(a, b):
    assert np.array_equal(a.lidar_positions, b.lidar_positions)
    assert np.array_equal(a.lidar_rotations, b.lidar_rotations)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a.clouds, b.clouds))
    for r in a.imu:
        assert np.array_equal(a.imu[r].T, b.imu[r].T) and np.array_equal(a.imu[r].R, b.imu[r].R)
    for fa, fb in zip(a.boxes, b.boxes):
        assert [(x.center.tolist(), x.size.tolist(), x.yaw, x.score) for x in fa] == \
            [(x.center.tolist(), x.size.tolist(), x.yaw, x.score) for x in fb]
    assert np.array_equal(a.true_box, b.true_box)
    assert np.array_equal(a.scene.vertices, b.scene.vertices)


# ---------------------------------------------------------------- spec and generate


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(duration=0.0)
    for name in ("heading_drift_rate", "translation_walk", "box_miss_rate", "dropout", "false_positives"):
        with pytest.raises(ValueError):
            ScenarioSpec(**{name: -0.1})
    with pytest.raises(ValueError):
        ScenarioSpec(box_miss_rate=1.5)


def test_same_seed_is_bit_identical(capsule):
    spec = ScenarioSpec(duration=20.0, seed=7, lidar=LidarSpec(n_beams=16, n_columns=128))
    a, b = generate(spec, capsule), generate(spec, capsule)
    bundles_equal(a, b)
    c = generate(ScenarioSpec(duration=20.0, seed=8, lidar=LidarSpec(n_beams=16, n_columns=128)), capsule)
    assert not np.array_equal(a.imu["wearer"].T, c.imu["wearer"].T)


def test_leaving_scene_bounds_is_an_error(capsule):
    with pytest.raises(ValueError, match="scene bounds"):
        generate(ScenarioSpec(duration=20.0, second_offset=(70.0, 0.0)), capsule)
    with pytest.raises(ValueError, match="too short"):
        generate(ScenarioSpec(duration=5.0), capsule)
    # a shorter walk means a smaller loop whose corners would make the legs collide
    with pytest.raises(ValueError, match="too tight"):
        generate(ScenarioSpec(duration=15.0), capsule)


def test_zero_corruption_equals_truth_bitwise():
    truth = straight_walk(10.0)
    spec = ScenarioSpec(**QUIET)
    out = corrupt_imu(truth, spec, 0.0, np.random.default_rng(0), terrain=None)
    ref = imu_reference(truth)
    for name in ("T", "R", "theta", "beta"):
        assert np.array_equal(getattr(out, name), getattr(ref, name)), name
    # R_WI is a signed permutation, so the frame change back to world is exact
    assert np.array_equal(ref.T @ R_WI.T, truth.T - truth.T[0])


def test_zero_corruption_bundle_matches_truth(capsule):
    spec = ScenarioSpec(duration=20.0, seed=1, second_person=False, lidar=LidarSpec(n_beams=16, n_columns=128),
                        **QUIET)
    b = generate(spec, capsule)
    imu = synced_imu(b, "wearer")
    truth = b.truth["wearer"]
    np.testing.assert_allclose(imu.T @ R_WI.T, truth.T - truth.T[0], atol=1e-9)
    np.testing.assert_allclose(R_WI @ rodrigues(imu.R), rodrigues(truth.R), atol=1e-9)


def test_heading_drift_is_deterministic_integration():
    truth = straight_walk(60.0)
    spec = ScenarioSpec(heading_drift_rate=0.25, translation_walk=0.0, flat_ground=False)
    out = corrupt_imu(truth, spec, 0.0, np.random.default_rng(0))
    drift = R_WI @ rodrigues(out.R) @ rodrigues(truth.R).transpose(0, 2, 1)
    yaw = np.degrees(np.arctan2(drift[:, 1, 0], drift[:, 0, 0]))
    assert yaw[-1] == pytest.approx(15.0, abs=1e-9)
    np.testing.assert_allclose(drift[:, 2], [[0, 0, 1]] * len(drift), atol=1e-12)
    np.testing.assert_allclose(yaw, 0.25 * np.arange(len(yaw)) / 100.0, atol=1e-9)


def test_flat_ground_projection_removes_terrain_height():
    truth = straight_walk(5.0)
    truth.T[:, 2] += 0.1 * truth.T[:, 0]
    spec = ScenarioSpec(heading_drift_rate=0.0, translation_walk=0.0, flat_ground=True)
    out = corrupt_imu(truth, spec, 0.0, np.random.default_rng(0), terrain=lambda xy: 0.1 * xy[:, 0])
    np.testing.assert_allclose((out.T @ R_WI.T)[:, 2], 0.0, atol=1e-12)


def solid_angle_count(verts, faces, origin, sensor, cell=0.005):
    """Silhouette area (raster of the triangles projected onto the plane facing the sensor) over the
    angular area of one beam cell at the body's range."""
    d = verts.mean(0) - origin
    rng = np.linalg.norm(d)
    w = d / rng
    u = np.cross([0.0, 0.0, 1.0], w)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    p = np.stack([verts @ u, verts @ v], axis=1)
    lo, hi = p.min(0), p.max(0)
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0], cell) + cell / 2, np.arange(lo[1], hi[1], cell) + cell / 2)
    q = np.stack([gx.ravel(), gy.ravel()], axis=1)
    inside = np.zeros(len(q), bool)
    for f in faces:
        a, b, c = p[f]
        m = np.array([b - a, c - a]).T
        if abs(np.linalg.det(m)) < 1e-14:
            continue
        box = np.all((q >= np.minimum.reduce([a, b, c])) & (q <= np.maximum.reduce([a, b, c])), axis=1)
        lam = np.linalg.solve(m, (q[box] - a).T)
        inside[np.flatnonzero(box)[(lam >= 0).all(0) & (lam.sum(0) <= 1)]] = True
    area = inside.sum() * cell * cell
    d_az = 2 * np.pi / sensor.n_columns
    d_el = np.radians(sensor.fov_up - sensor.fov_down) / (sensor.n_beams - 1)
    return area / (rng * rng * d_az * d_el)


def test_crop_point_count_matches_solid_angle(capsule):
    sensor = LidarSpec()
    assert sensor.n_beams == 128
    R = Rotation.from_matrix(R_WI).as_rotvec()[None]
    verts, _ = forward_batch(capsule, np.zeros((1, 3)) + [0, 0, 0.9], R, np.zeros((1, 23, 3)))
    origin = np.array([0.0, -5.0, 1.0])
    hits = cast_rays(verts[0], capsule.faces, origin, np.eye(3), sensor)
    expected = solid_angle_count(verts[0], capsule.faces, origin, sensor)
    assert 0.5 * expected <= len(hits.points) <= 2 * expected


# ---------------------------------------------------------------- truth properties


@pytest.mark.parametrize("role", ["wearer", "second"])
def test_truth_is_physically_plausible(capsule, small_bundle, role):
    truth = small_bundle.truth[role]
    ctx = WindowContext.from_motion(capsule, truth, scene=small_bundle.scene_world)
    with torch.no_grad():
        terms = compute_terms(ctx, terms=("pen", "cont", "coll"))
    assert float(terms["pen"]) == 0.0
    assert float(terms["cont"]) < 1e-24
    # sole vertices sit on z = 0 up to rounding of the forward kinematics
    assert float(terms["coll"]) < 1e-12
    assert metric_fse(truth, capsule) < 1.0


def test_truth_stance_feet_are_static(small_bundle, capsule):
    truth = small_bundle.truth["wearer"]
    verts, _ = forward_batch(capsule, truth.T, truth.R, truth.theta)
    stance = small_bundle.stance["wearer"]
    for side, idx in enumerate((capsule.foot_left, capsule.foot_right)):
        both = stance[1:, side] & stance[:-1, side]
        step = np.abs(np.diff(verts[:, idx], axis=0)).max(axis=(1, 2))
        assert step[both].max() < 1e-9
        assert np.abs(verts[stance[:, side]][:, idx, 2].min(axis=1)).max() < 1e-9


def test_corruption_never_lowers_baseline_error():
    truth = straight_walk(30.0)
    means = []
    for scale in (0.0, 0.5, 1.0, 2.0):
        spec = ScenarioSpec(heading_drift_rate=0.25 * scale, translation_walk=0.01 * scale, flat_ground=False)
        rms = []
        for seed in range(10):
            out = corrupt_imu(truth, spec, 0.0, np.random.default_rng(seed))
            world = out.T @ R_WI.T + truth.T[0]
            rms.append(np.sqrt(np.mean(np.sum((world - truth.T) ** 2, axis=1))))
        means.append(np.mean(rms))
    assert means[0] < 1e-12
    assert all(a <= b for a, b in zip(means, means[1:])), means


# ---------------------------------------------------------------- score_against_truth


def test_score_examples():
    model = toy_body()
    truth = static_motion(model, 3)
    zero = score_against_truth(truth, truth, model)
    assert zero == {"trajectory_rms": 0.0, "joint_angle_rms": 0.0, "gle_mm": 0.0}
    moved = truth.copy()
    moved.T = moved.T + [0.0, 0.1, 0.0]
    assert score_against_truth(moved, truth)["trajectory_rms"] == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ValueError):
        score_against_truth(truth.slice(0, 2), truth)


def test_score_hand_computed():
    model = toy_body()
    truth = static_motion(model, 3)
    res = truth.copy()
    res.T = np.array([[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.0, 0.4]])
    res.theta[1, 0] = [0.2, 0.0, 0.0]
    res.theta[2, 3] = [0.0, 0.0, -0.6]
    out = score_against_truth(res, truth)
    # squared norms 0, 0.09, 0.16 over 3 frames; two angles 0.2 and 0.6 among 3 x 4 joints
    assert out["trajectory_rms"] == pytest.approx(np.sqrt(0.25 / 3), abs=1e-15)
    assert out["joint_angle_rms"] == pytest.approx(np.sqrt(0.4 / 12), abs=1e-12)

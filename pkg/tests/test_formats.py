import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from helpers import box_mesh
from lidarmocap.body_model import MotionSequence
from lidarmocap.errors import DimensionMismatchError, FormatError, FormatVersionError, TruncatedFileError
from lidarmocap.formats import (
    boxes_from_jsonl,
    boxes_to_jsonl,
    load_boxes,
    load_clouds,
    load_crops,
    load_motion,
    load_scene,
    load_trajectory,
    motion_from_json,
    motion_to_json,
    read_ply,
    save_boxes,
    save_clouds,
    save_crops,
    save_motion,
    save_scene,
    save_trajectory,
    sha256_file,
    trajectory_from_csv,
    trajectory_to_csv,
    write_ply,
    write_ply_scene,
)
from lidarmocap.geometry.scene import PointCloudFrame, SceneMap
from lidarmocap.localization import Box
from lidarmocap.npzio import read_npz, write_npz
from lidarmocap.trajectory import Trajectory

finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


def random_motion_seq(rng, n=7, joints=23):
    return MotionSequence(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, joints, 3)),
                          rng.normal(size=10), float(rng.uniform(1, 200)), float(rng.normal()))


def random_trajectory(rng, n=9):
    return Trajectory(np.cumsum(rng.uniform(0.01, 1.0, n)), rng.normal(size=(n, 3)) * 100,
                      Rotation.random(n, random_state=int(rng.integers(1 << 30))).as_matrix(), "L")


def motions_equal(a, b):
    for k in ("T", "R", "theta", "beta"):
        assert np.array_equal(getattr(a, k), getattr(b, k)), k
    assert a.fps == b.fps and a.start_time == b.start_time


# ---------------------------------------------------------------- binary round trips


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=finite),
       st.integers(0, 2**31 - 1))
def test_motion_binary_round_trip_is_bitwise(tmp_path_factory, T, seed):
    rng = np.random.default_rng(seed)
    m = random_motion_seq(rng, len(T))
    m.T = T
    path = tmp_path_factory.mktemp("m") / "m.npz"
    save_motion(path, m)
    motions_equal(load_motion(path), m)


def test_trajectory_binary_round_trip(tmp_path):
    t = random_trajectory(np.random.default_rng(0))
    save_trajectory(tmp_path / "t.npz", t)
    u = load_trajectory(tmp_path / "t.npz")
    assert np.array_equal(u.times, t.times) and np.array_equal(u.positions, t.positions)
    assert np.array_equal(u.rotations, t.rotations) and u.frame == t.frame


def test_clouds_and_crops_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    clouds = [PointCloudFrame(rng.normal(size=(n, 3)), 0.05 * i, "S", i) for i, n in enumerate([5, 0, 17, 1])]
    save_clouds(tmp_path / "c.npz", clouds)
    back = load_clouds(tmp_path / "c.npz")
    assert [(c.timestamp, c.frame, c.frame_id) for c in back] == [(c.timestamp, c.frame, c.frame_id) for c in clouds]
    assert all(np.array_equal(a.points, b.points) for a, b in zip(back, clouds))
    crops = [c.points for c in clouds]
    save_crops(tmp_path / "k.npz", crops, np.array([True, False, True, True]), np.array([0, -1, 2, 1]))
    got, vis, sel = load_crops(tmp_path / "k.npz")
    assert all(np.array_equal(a, b) for a, b in zip(got, crops))
    assert vis.tolist() == [True, False, True, True] and sel.tolist() == [0, -1, 2, 1]


def test_scene_round_trip(tmp_path):
    v, f = box_mesh([-1, -1, -1], [1, 1, 0])
    mesh = SceneMap(vertices=v, faces=f, ground_mask=np.arange(len(f)) % 2 == 0, frame="W")
    save_scene(tmp_path / "s.npz", mesh)
    back = load_scene(tmp_path / "s.npz")
    assert np.array_equal(back.vertices, v) and np.array_equal(back.faces, f)
    assert np.array_equal(back.ground_mask, mesh.ground_mask) and back.frame == "W"
    rng = np.random.default_rng(2)
    n = rng.normal(size=(30, 3))
    pts = SceneMap(points=rng.normal(size=(30, 3)), normals=n / np.linalg.norm(n, axis=1, keepdims=True),
                   ground_mask=rng.random(30) < 0.5, frame="L")
    save_scene(tmp_path / "p.npz", pts)
    back = load_scene(tmp_path / "p.npz")
    assert np.array_equal(back.points, pts.points) and np.array_equal(back.normals, pts.normals)
    assert back.frame == "L"


def test_archives_are_byte_deterministic(tmp_path):
    m = random_motion_seq(np.random.default_rng(3))
    save_motion(tmp_path / "a.npz", m)
    save_motion(tmp_path / "b.npz", m)
    assert sha256_file(tmp_path / "a.npz") == sha256_file(tmp_path / "b.npz")


# ---------------------------------------------------------------- text round trips


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_motion_text_round_trip_is_exact(seed):
    m = random_motion_seq(np.random.default_rng(seed))
    motions_equal(motion_from_json(motion_to_json(m)), m)


def test_trajectory_csv_round_trip():
    t = random_trajectory(np.random.default_rng(4), 50)
    u = trajectory_from_csv(trajectory_to_csv(t))
    np.testing.assert_allclose(u.positions, t.positions, atol=1e-9, rtol=0)
    np.testing.assert_allclose(u.rotations, t.rotations, atol=1e-9, rtol=0)
    np.testing.assert_allclose(u.times, t.times, atol=1e-9, rtol=0)


def test_large_cloud_ply_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100_000, 3)) * 30
    write_ply(tmp_path / "c.ply", pts)
    back = read_ply(tmp_path / "c.ply")["vertices"]
    assert np.abs(back - pts).max() <= 1e-9


def test_ply_scene_round_trip(tmp_path):
    v, f = box_mesh([-1, -1, -1], [1, 1, 0])
    mesh = SceneMap(vertices=v, faces=f, ground_mask=np.arange(len(f)) % 3 == 0)
    write_ply_scene(tmp_path / "s.ply", mesh)
    back = load_scene(tmp_path / "s.ply")
    assert np.abs(back.vertices - v).max() <= 1e-9 and np.array_equal(back.faces, f)
    assert np.array_equal(back.ground_mask, mesh.ground_mask)


def test_boxes_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    boxes = [[Box(rng.normal(size=3), rng.uniform(0.2, 2, 3), float(rng.uniform(-3, 3)), float(rng.random()), i, "p")
              for _ in range(k)] for i, k in enumerate([2, 0, 3])]
    save_boxes(tmp_path / "b.jsonl", boxes)
    back = load_boxes(tmp_path / "b.jsonl")
    for fa, fb in zip(back, boxes):
        assert len(fa) == len(fb)
        for a, b in zip(fa, fb):
            assert np.array_equal(a.center, b.center) and np.array_equal(a.size, b.size)
            assert (a.yaw, a.score, a.frame_id, a.label) == (b.yaw, b.score, b.frame_id, b.label)


# ---------------------------------------------------------------- errors


def test_version_errors(tmp_path):
    write_npz(tmp_path / "v2.npz", {"T": np.zeros((1, 3))}, "lidarmocap.motion", 2)
    with pytest.raises(FormatVersionError):
        load_motion(tmp_path / "v2.npz")
    save_trajectory(tmp_path / "t.npz", random_trajectory(np.random.default_rng(0)))
    with pytest.raises(FormatVersionError):
        load_motion(tmp_path / "t.npz")
    with pytest.raises(FormatVersionError):
        motion_from_json('{"format": "lidarmocap.motion.json", "version": 9}')
    with pytest.raises(FormatVersionError):
        trajectory_from_csv("# something else\nt,x\n")
    with pytest.raises(FormatVersionError):
        boxes_from_jsonl('{"format": "lidarmocap.boxes", "version": 0, "frames": 0}\n')
    (tmp_path / "b.ply").write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(FormatVersionError):
        read_ply(tmp_path / "b.ply")


def test_truncation_errors(tmp_path):
    m = random_motion_seq(np.random.default_rng(7))
    save_motion(tmp_path / "m.npz", m)
    data = (tmp_path / "m.npz").read_bytes()
    (tmp_path / "cut.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(TruncatedFileError):
        load_motion(tmp_path / "cut.npz")
    text = motion_to_json(m)
    with pytest.raises(TruncatedFileError):
        motion_from_json(text[: len(text) // 2])
    csv = trajectory_to_csv(random_trajectory(np.random.default_rng(0)))
    with pytest.raises(TruncatedFileError):
        trajectory_from_csv(csv[: len(csv) - 20])
    lines = boxes_to_jsonl([[], [], []]).splitlines()
    with pytest.raises(TruncatedFileError):
        boxes_from_jsonl("\n".join(lines[:2]))
    write_ply(tmp_path / "c.ply", np.zeros((10, 3)))
    cut = "\n".join((tmp_path / "c.ply").read_text().splitlines()[:-3])
    (tmp_path / "c.ply").write_text(cut)
    with pytest.raises(TruncatedFileError):
        read_ply(tmp_path / "c.ply")


def test_dimension_errors(tmp_path):
    write_npz(tmp_path / "m.npz", {"T": np.zeros((4, 3)), "R": np.zeros((3, 3)), "theta": np.zeros((4, 23, 3)),
                                   "beta": np.zeros(10), "fps": np.float64(20), "start_time": np.float64(0)},
              "lidarmocap.motion", 1)
    with pytest.raises(DimensionMismatchError):
        load_motion(tmp_path / "m.npz")
    write_npz(tmp_path / "c.npz", {"points": np.zeros((5, 3)), "counts": np.array([2, 2]),
                                   "timestamps": np.zeros(2), "frame_ids": np.arange(2), "frame": np.array("S")},
              "lidarmocap.clouds", 1)
    with pytest.raises(DimensionMismatchError):
        load_clouds(tmp_path / "c.npz")
    with pytest.raises(DimensionMismatchError):
        boxes_from_jsonl('{"format": "lidarmocap.boxes", "version": 1, "frames": 1}\n'
                         '{"frame": 0, "boxes": [{"center": [0, 0], "size": [1, 1, 1], "yaw": 0}]}\n')
    (tmp_path / "q.ply").write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\n"
                                    "property double z\nelement face 1\nproperty list uchar int vertex_indices\n"
                                    "end_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(DimensionMismatchError):
        read_ply(tmp_path / "q.ply")


def test_error_kinds_are_distinct():
    assert len({FormatVersionError, TruncatedFileError, DimensionMismatchError}) == 3
    for cls in (FormatVersionError, TruncatedFileError, DimensionMismatchError):
        assert issubclass(cls, FormatError)
        others = {FormatVersionError, TruncatedFileError, DimensionMismatchError} - {cls}
        assert not any(issubclass(cls, o) for o in others)


def test_missing_tags_and_fields(tmp_path):
    with zipfile.ZipFile(tmp_path / "raw.npz", "w") as zf:
        zf.writestr("x.npy", b"")
    with pytest.raises((FormatError, TruncatedFileError)):
        read_npz(tmp_path / "raw.npz", "lidarmocap.motion", (1,))
    write_npz(tmp_path / "m.npz", {"T": np.zeros((1, 3))}, "lidarmocap.motion", 1)
    with pytest.raises(FormatError, match="missing"):
        load_motion(tmp_path / "m.npz")

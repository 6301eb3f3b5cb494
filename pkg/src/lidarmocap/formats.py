"""Readers and writers for every file the pipeline consumes or produces.

Binary payloads (motions, trajectories, clouds, crops, scenes) are versioned
``.npz`` archives written byte-deterministically. Text formats (JSON motion
export, CSV trajectories, JSONL boxes, ASCII PLY) print floats with ``repr``
so numeric payloads survive a round trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .body_model import MotionSequence
from .errors import DimensionMismatchError, FormatError, FormatVersionError, TruncatedFileError
from .geometry.scene import PointCloudFrame, SceneMap, estimate_normals
from .localization import Box
from .npzio import read_npz, write_npz
from .trajectory import Trajectory

MOTION_FORMAT = "lidarmocap.motion"
TRAJECTORY_FORMAT = "lidarmocap.trajectory"
CLOUDS_FORMAT = "lidarmocap.clouds"
CROPS_FORMAT = "lidarmocap.crops"
SCENE_FORMAT = "lidarmocap.scene"
VERSION = 1
TEXT_MOTION_FORMAT = "lidarmocap.motion.json"
BOXES_FORMAT = "lidarmocap.boxes"


def _require(arrays: dict, keys: tuple[str, ...], path) -> None:
    missing = [k for k in keys if k not in arrays]
    if missing:
        raise FormatError(f"{path}: missing fields {missing}")


def _wrap_shape_error(path, fn):
    try:
        return fn()
    except DimensionMismatchError as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path: str | os.PathLike, text: str) -> None:
    """Write UTF-8 text with Unix newlines, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def write_json(path: str | os.PathLike, payload) -> None:
    write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(f"{path}: malformed or truncated JSON ({exc})") from exc


# motions

def save_motion(path: str | os.PathLike, motion: MotionSequence) -> None:
    write_npz(path, {"T": motion.T, "R": motion.R, "theta": motion.theta, "beta": motion.beta,
                     "fps": np.float64(motion.fps), "start_time": np.float64(motion.start_time)},
              MOTION_FORMAT, VERSION)


def load_motion(path: str | os.PathLike) -> MotionSequence:
    a, _ = read_npz(path, MOTION_FORMAT, (VERSION,))
    _require(a, ("T", "R", "theta", "beta", "fps", "start_time"), path)
    return _wrap_shape_error(path, lambda: MotionSequence(a["T"], a["R"], a["theta"], a["beta"],
                                                          float(a["fps"]), float(a["start_time"])))


def motion_to_json(motion: MotionSequence) -> str:
    return json.dumps({"format": TEXT_MOTION_FORMAT, "version": VERSION, "fps": motion.fps,
                       "start_time": motion.start_time, "beta": motion.beta.tolist(), "T": motion.T.tolist(),
                       "R": motion.R.tolist(), "theta": motion.theta.tolist()})


def motion_from_json(text: str) -> MotionSequence:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(f"malformed or truncated motion text ({exc})") from exc
    if d.get("format") != TEXT_MOTION_FORMAT or d.get("version") != VERSION:
        raise FormatVersionError(f"unsupported motion text {d.get('format')!r} version {d.get('version')!r}")
    try:
        return MotionSequence(np.array(d["T"], float).reshape(-1, 3), np.array(d["R"], float).reshape(-1, 3),
                              np.array(d["theta"], float), np.array(d["beta"], float), float(d["fps"]),
                              float(d["start_time"]))
    except (KeyError, ValueError) as exc:
        raise DimensionMismatchError(f"motion text: {exc}") from exc


# trajectories

def save_trajectory(path: str | os.PathLike, traj: Trajectory) -> None:
    write_npz(path, {"times": traj.times, "positions": traj.positions, "rotations": traj.rotations,
                     "frame": np.array(traj.frame)}, TRAJECTORY_FORMAT, VERSION)


def load_trajectory(path: str | os.PathLike) -> Trajectory:
    a, _ = read_npz(path, TRAJECTORY_FORMAT, (VERSION,))
    _require(a, ("times", "positions", "rotations", "frame"), path)
    return _wrap_shape_error(path, lambda: Trajectory(a["times"], a["positions"], a["rotations"], str(a["frame"])))


_TRAJ_HEADER = "# " + TRAJECTORY_FORMAT + f" v{VERSION}"
_TRAJ_COLUMNS = "t,x,y,z,r00,r01,r02,r10,r11,r12,r20,r21,r22"


def trajectory_to_csv(traj: Trajectory) -> str:
    lines = [_TRAJ_HEADER + f" frame={traj.frame}", _TRAJ_COLUMNS]
    for t, p, r in zip(traj.times, traj.positions, traj.rotations):
        lines.append(",".join(repr(float(x)) for x in (t, *p, *r.reshape(-1))))
    return "\n".join(lines) + "\n"


def trajectory_from_csv(text: str) -> Trajectory:
    lines = text.splitlines()
    if len(lines) < 2 or not lines[0].startswith(_TRAJ_HEADER):
        raise FormatVersionError("not a version-1 trajectory CSV")
    frame = lines[0].split("frame=")[-1].strip() if "frame=" in lines[0] else "L"
    rows = []
    for ln in lines[2:]:
        vals = ln.split(",")
        if len(vals) != 13:
            raise TruncatedFileError(f"trajectory row has {len(vals)} of 13 fields")
        rows.append([float(v) for v in vals])
    a = np.array(rows, float).reshape(-1, 13)
    return Trajectory(a[:, 0], a[:, 1:4], a[:, 4:].reshape(-1, 3, 3), frame)


# point clouds

def save_clouds(path: str | os.PathLike, clouds: list[PointCloudFrame]) -> None:
    counts = np.array([len(c) for c in clouds], np.int64)
    frames = {c.frame for c in clouds}
    if len(frames) > 1:
        raise ValueError("all clouds of a sequence must share one frame tag")
    write_npz(path, {
        "points": np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3)),
        "counts": counts,
        "timestamps": np.array([c.timestamp for c in clouds], np.float64),
        "frame_ids": np.array([c.frame_id for c in clouds], np.int64),
        "frame": np.array(frames.pop() if frames else "S"),
    }, CLOUDS_FORMAT, VERSION)


def load_clouds(path: str | os.PathLike) -> list[PointCloudFrame]:
    a, _ = read_npz(path, CLOUDS_FORMAT, (VERSION,))
    _require(a, ("points", "counts", "timestamps", "frame_ids", "frame"), path)
    counts = a["counts"]
    if a["points"].ndim != 2 or a["points"].shape[1] != 3 or counts.sum() != len(a["points"]) \
            or len(a["timestamps"]) != len(counts) or len(a["frame_ids"]) != len(counts):
        raise DimensionMismatchError(f"{path}: cloud counts do not match the stored points")
    parts = np.split(a["points"], np.cumsum(counts)[:-1]) if len(counts) else []
    tag = str(a["frame"])
    return [PointCloudFrame(p, float(t), tag, int(i)) for p, t, i in zip(parts, a["timestamps"], a["frame_ids"])]


def save_crops(path: str | os.PathLike, crops: list[np.ndarray], visible: np.ndarray,
               selected: np.ndarray | None = None) -> None:
    """Per-frame body crops with the visibility flag and the selected box index (-1 when none)."""
    n = len(crops)
    selected = np.full(n, -1, np.int64) if selected is None else np.asarray(selected, np.int64)
    write_npz(path, {
        "points": np.concatenate([np.asarray(c, float).reshape(-1, 3) for c in crops]) if n else np.zeros((0, 3)),
        "counts": np.array([len(c) for c in crops], np.int64),
        "visible": np.asarray(visible, bool),
        "selected": selected,
    }, CROPS_FORMAT, VERSION)


def load_crops(path: str | os.PathLike) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    a, _ = read_npz(path, CROPS_FORMAT, (VERSION,))
    _require(a, ("points", "counts", "visible", "selected"), path)
    counts = a["counts"]
    if counts.sum() != len(a["points"]) or len(a["visible"]) != len(counts) or len(a["selected"]) != len(counts):
        raise DimensionMismatchError(f"{path}: crop counts do not match the stored points")
    crops = np.split(a["points"], np.cumsum(counts)[:-1]) if len(counts) else []
    return [c.copy() for c in crops], a["visible"].astype(bool), a["selected"]


# scenes

def save_scene(path: str | os.PathLike, scene: SceneMap) -> None:
    if scene.is_mesh:
        arrays = {"vertices": scene.vertices, "faces": scene.faces}
    else:
        arrays = {"points": scene.points, "normals": scene.normals}
    arrays.update(ground_mask=scene.ground_mask, frame=np.array(scene.frame))
    write_npz(path, arrays, SCENE_FORMAT, VERSION)


def load_scene(path: str | os.PathLike, viewpoints: np.ndarray | None = None) -> SceneMap:
    """Read a scene archive or PLY file. ``viewpoints`` (capture positions in the
    scene frame) orient estimated normals of a PLY point set that has none."""
    if Path(path).suffix.lower() == ".ply":
        return read_ply_scene(path, viewpoints=viewpoints)
    a, _ = read_npz(path, SCENE_FORMAT, (VERSION,))
    _require(a, ("ground_mask", "frame"), path)
    try:
        if "vertices" in a:
            return SceneMap(vertices=a["vertices"], faces=a["faces"], ground_mask=a["ground_mask"], frame=str(a["frame"]))
        return SceneMap(points=a["points"], normals=a["normals"], ground_mask=a["ground_mask"], frame=str(a["frame"]))
    except (KeyError, ValueError) as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc


def write_ply(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray | None = None,
              vertex_props: dict[str, np.ndarray] | None = None, face_props: dict[str, np.ndarray] | None = None) -> None:
    """ASCII PLY with double coordinates and optional integer per-face / float per-vertex properties."""
    vertices = np.asarray(vertices, float).reshape(-1, 3)
    vertex_props = vertex_props or {}
    face_props = face_props or {}
    head = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
            "property double x", "property double y", "property double z"]
    head += [f"property double {k}" for k in vertex_props]
    if faces is not None:
        head += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
        head += [f"property int {k}" for k in face_props]
    head.append("end_header")
    rows = []
    vcols = [vertices] + [np.asarray(v, float).reshape(len(vertices), -1) for v in vertex_props.values()]
    vall = np.concatenate(vcols, axis=1)
    rows.extend(" ".join(repr(float(x)) for x in r) for r in vall)
    if faces is not None:
        fp = [np.asarray(v, np.int64).reshape(-1) for v in face_props.values()]
        for i, f in enumerate(np.asarray(faces, np.int64)):
            rows.append(" ".join([str(len(f)), *map(str, f), *(str(int(p[i])) for p in fp)]))
    write_text(path, "\n".join(head + rows) + "\n")


def read_ply(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Parse an ASCII PLY written by :func:`write_ply` (or any ASCII file with
    x/y/z vertices and triangle faces). Returns ``vertices``, optional
    ``faces`` and one array per extra property."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise FormatVersionError(f"{path}: only 'format ascii 1.0' PLY is supported")
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    i = 2
    while i < len(lines) and lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok and tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok and tok[0] == "property":
            elements[-1][2].append((tok[1], tok[-1]))
        i += 1
    if i >= len(lines):
        raise TruncatedFileError(f"{path}: header has no end_header line")
    body = lines[i + 1:]
    out: dict[str, np.ndarray] = {}
    pos = 0
    for name, count, props in elements:
        if pos + count > len(body):
            raise TruncatedFileError(f"{path}: element '{name}' has {len(body) - pos} of {count} rows")
        rows = [body[pos + r].split() for r in range(count)]
        pos += count
        if name == "vertex":
            a = np.array(rows, float).reshape(count, len(props))
            cols = [p[1] for p in props]
            out["vertices"] = a[:, [cols.index(c) for c in ("x", "y", "z")]]
            for j, c in enumerate(cols):
                if c not in ("x", "y", "z"):
                    out[c] = a[:, j]
        elif name == "face":
            extra = [p[1] for p in props if p[0] != "list"]
            faces, ext = [], []
            for r in rows:
                n = int(r[0])
                if n != 3:
                    raise DimensionMismatchError(f"{path}: only triangle faces are supported")
                faces.append([int(x) for x in r[1:4]])
                ext.append([int(x) for x in r[4:]])
            out["faces"] = np.array(faces, np.int64).reshape(count, 3)
            for j, c in enumerate(extra):
                out[c] = np.array([e[j] for e in ext], np.int64)
    return out


def write_ply_scene(path: str | os.PathLike, scene: SceneMap) -> None:
    if scene.is_mesh:
        write_ply(path, scene.vertices, scene.faces, face_props={"ground": scene.ground_mask.astype(np.int64)})
    else:
        write_ply(path, scene.points, vertex_props={"nx": scene.normals[:, 0], "ny": scene.normals[:, 1],
                                                    "nz": scene.normals[:, 2],
                                                    "ground": scene.ground_mask.astype(float)})


def read_ply_scene(path: str | os.PathLike, frame: str = "W", viewpoints: np.ndarray | None = None) -> SceneMap:
    d = read_ply(path)
    if "faces" in d:
        return SceneMap(vertices=d["vertices"], faces=d["faces"], ground_mask=d.get("ground"), frame=frame)
    if all(k in d for k in ("nx", "ny", "nz")):
        normals = np.stack([d["nx"], d["ny"], d["nz"]], 1)
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    elif viewpoints is not None:
        normals = estimate_normals(d["vertices"], viewpoints)
    else:
        raise FormatError(f"{path}: a point-set scene needs nx, ny, nz vertex properties or capture viewpoints")
    return SceneMap(points=d["vertices"], normals=normals,
                    ground_mask=d["ground"] > 0.5 if "ground" in d else None, frame=frame)


# boxes

def boxes_to_jsonl(boxes: list[list[Box]]) -> str:
    lines = [json.dumps({"format": BOXES_FORMAT, "version": VERSION, "frames": len(boxes)})]
    for i, frame in enumerate(boxes):
        lines.append(json.dumps({"frame": i, "boxes": [
            {"center": b.center.tolist(), "size": b.size.tolist(), "yaw": float(b.yaw), "score": float(b.score),
             "label": b.label} for b in frame]}))
    return "\n".join(lines) + "\n"


def boxes_from_jsonl(text: str) -> list[list[Box]]:
    lines = text.splitlines()
    try:
        head = json.loads(lines[0]) if lines else {}
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed box file header ({exc})") from exc
    if head.get("format") != BOXES_FORMAT or head.get("version") != VERSION:
        raise FormatVersionError(f"unsupported box file {head.get('format')!r} version {head.get('version')!r}")
    n = int(head["frames"])
    if len(lines) - 1 < n:
        raise TruncatedFileError(f"box file has {len(lines) - 1} of {n} frames")
    out = []
    for i in range(n):
        try:
            rec = json.loads(lines[i + 1])
        except json.JSONDecodeError as exc:
            raise TruncatedFileError(f"box frame {i} is malformed ({exc})") from exc
        if rec.get("frame") != i:
            raise FormatError(f"box frames out of order at line {i + 2}")
        frame = []
        for b in rec["boxes"]:
            if len(b["center"]) != 3 or len(b["size"]) != 3:
                raise DimensionMismatchError(f"box in frame {i} needs 3-vector center and size")
            frame.append(Box(b["center"], b["size"], b["yaw"], b.get("score", 1.0), i, b.get("label", "")))
        out.append(frame)
    return out


def save_boxes(path: str | os.PathLike, boxes: list[list[Box]]) -> None:
    write_text(path, boxes_to_jsonl(boxes))


def load_boxes(path: str | os.PathLike) -> list[list[Box]]:
    with open(path, encoding="utf-8") as f:
        return boxes_from_jsonl(f.read())

"""Writes a synthetic session to disk in the pipeline's input formats."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .body_model import save_body_model
from .config import PersonConfig, PipelineConfig, SensorConfig
from .formats import save_boxes, save_clouds, save_motion, save_scene, save_trajectory, write_json, write_text
from .synthgen import SynthBundle
from .trajectory import Trajectory

TRUTH_DIR = "truth"


def bundle_config(bundle: SynthBundle, output: str = "out") -> PipelineConfig:
    """Pipeline configuration matching a bundle written by :func:`write_bundle`."""
    cfg = PipelineConfig()
    persons = [PersonConfig(r, r, f"imu_{r}.npz") for r in bundle.imu]
    cfg.persons = persons
    cfg.paths.truth = TRUTH_DIR
    cfg.paths.output = output
    if "second" not in bundle.imu:
        cfg.paths.boxes = None
    c = cfg.calibration
    c.height = float(bundle.height)
    c.marker_offset = float(bundle.marker_offset)
    for hint, dst in ((bundle.ground_hint, c.ground_hint), (bundle.marker_hint, c.marker_hint)):
        dst.lo, dst.hi, dst.direction = ([float(x) for x in v] for v in (hint.lo, hint.hi, hint.direction))
    cfg.sensor = SensorConfig(**dataclasses.asdict(bundle.spec.lidar))
    cfg.seed = int(bundle.spec.seed)
    return cfg


def write_bundle(bundle: SynthBundle, directory: str | Path, output: str = "out") -> Path:
    """Write inputs, a ready-to-run ``config.yaml`` and the ground truth; return the config path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_body_model(bundle.model, d / "model.npz")
    save_scene(d / "scene.npz", bundle.scene)
    save_clouds(d / "clouds.npz", bundle.clouds)
    save_trajectory(d / "trajectory.npz",
                    Trajectory(bundle.lidar_times, bundle.lidar_positions, bundle.lidar_rotations, "L"))
    for name, motion in bundle.imu.items():
        save_motion(d / f"imu_{name}.npz", motion)
    if "second" in bundle.imu:
        save_boxes(d / "boxes.jsonl", bundle.boxes)
    t = d / TRUTH_DIR
    t.mkdir(exist_ok=True)
    for name, motion in bundle.truth.items():
        save_motion(t / f"{name}.npz", motion)
    save_scene(t / "scene_world.npz", bundle.scene_world)
    write_json(t / "truth.json", {
        "true_box": np.asarray(bundle.true_box).tolist(),
        "R_WL": np.asarray(bundle.R_WL).tolist(),
        "t_hl": np.asarray(bundle.t_hl).tolist(),
        "scenario": _jsonable(dataclasses.asdict(bundle.spec)),
    })
    cfg = bundle_config(bundle, output)
    path = d / "config.yaml"
    write_text(path, cfg.to_yaml())
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x

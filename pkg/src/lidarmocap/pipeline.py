"""End-to-end orchestration: calibrate, sync, localize, optimize, evaluate.

Every stage reads its inputs from the configured input files and the outputs
of earlier stages in the output directory, and writes its own results there,
so stages can be run one at a time or all together by :func:`run_all`. All
writes go through a :class:`OutputRecorder` and end up in the run manifest.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .body_model import BodyModel, MotionSequence, load_body_model
from .calib_sync import Calibration, build_R_WL, imu_to_world_transform, clock_map, detect_jump_peaks, synchronize_and_resample
from .config import PipelineConfig
from .errors import LidarMocapError
from .formats import (
    load_boxes,
    load_clouds,
    load_crops,
    load_motion,
    load_scene,
    load_trajectory,
    read_json,
    save_crops,
    save_motion,
    sha256_file,
    write_json,
    write_text,
)
from .geometry.scene import SceneMap
from .localization import Box, localize_first_person, localize_second_person
from .losses import LossWeights, active_terms, compute_terms
from .metrics import MetricReport, evaluate_motion, format_report
from .optimizer import SequenceInputs, optimize_sequence
from .trajectory import Trajectory

log = logging.getLogger(__name__)

STAGES = ("calibrate", "sync", "localize", "optimize", "evaluate")
MANIFEST = "manifest.json"


class StageError(LidarMocapError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    """What a run read and wrote. ``outputs`` maps output-relative paths to sha256."""

    config_hash: str
    inputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def output_hash(self) -> str:
        """Single digest over all output files (excluding timings)."""
        import hashlib

        return hashlib.sha256(json.dumps(self.outputs, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_hash"] = self.output_hash()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["config_hash"], d.get("inputs", {}), d.get("tool_version", ""), d.get("timings", {}),
                   d.get("outputs", {}))


class OutputRecorder:
    """Writes files below the output directory and remembers each one."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.written:
            self.written.append(rel)
        return p

    def hashes(self) -> dict[str, str]:
        return {rel: sha256_file(self.root / rel) for rel in sorted(self.written)}


# inputs

@dataclass(eq=False)
class PipelineInputs:
    model: BodyModel
    scene: SceneMap
    clouds: list
    trajectory: Trajectory
    imu: dict[str, MotionSequence]
    boxes: list[list[Box]] | None


def input_files(cfg: PipelineConfig) -> dict[str, Path]:
    files = {"model": cfg.paths.model, "scene": cfg.paths.scene, "clouds": cfg.paths.clouds,
             "trajectory": cfg.paths.trajectory}
    files.update({f"imu_{p.name}": p.imu for p in cfg.persons})
    if cfg.person("second") is not None:
        files["boxes"] = cfg.paths.boxes
    return {k: cfg.resolve(v) for k, v in files.items()}


def load_inputs(cfg: PipelineConfig) -> PipelineInputs:
    second = cfg.person("second")
    trajectory = load_trajectory(cfg.resolve(cfg.paths.trajectory))
    return PipelineInputs(
        model=load_body_model(cfg.resolve(cfg.paths.model)),
        scene=load_scene(cfg.resolve(cfg.paths.scene), viewpoints=trajectory.positions),
        clouds=load_clouds(cfg.resolve(cfg.paths.clouds)),
        trajectory=trajectory,
        imu={p.name: load_motion(cfg.resolve(p.imu)) for p in cfg.persons},
        boxes=load_boxes(cfg.resolve(cfg.paths.boxes)) if second is not None else None,
    )


def _world(inputs: PipelineInputs, calib: Calibration):
    """World-frame sensor trajectory and scene."""
    rwl = np.asarray(calib.R_WL, float)
    traj = inputs.trajectory.transformed(rwl)
    scene = inputs.scene.transformed(rwl[:3, :3], rwl[:3, 3], "W")
    return traj, scene


# stages

def stage_calibrate(cfg: PipelineConfig, inputs: PipelineInputs, rec: OutputRecorder) -> Calibration:
    """Map-to-world transform from the ground and marker planes of the first scan."""
    c0 = inputs.clouds[0]
    traj = inputs.trajectory
    scan = c0.points if c0.frame != "S" else c0.points @ traj.rotations[0].T + traj.positions[0]
    cc = cfg.calibration
    rwl = build_R_WL(scan, cc.ground_hint.crop_hint(), cc.marker_hint.crop_hint(), cc.height, cc.marker_offset,
                     cc.plane_threshold, cc.ransac_iterations, cfg.seed)
    calib = Calibration(rwl, imu_to_world_transform(), cc.height, cc.marker_offset)
    write_text(rec.path("calibration.yaml"), calib.to_yaml())
    return calib


def _imu_heights(motion: MotionSequence, R_WI: np.ndarray) -> np.ndarray:
    return motion.T @ np.asarray(R_WI, float)[:3, :3][2]


def stage_sync(cfg: PipelineConfig, inputs: PipelineInputs, calib: Calibration, rec: OutputRecorder
               ) -> dict[str, MotionSequence]:
    """Clock maps from jump apexes and IMU tracks resampled at the scan times."""
    traj, _ = _world(inputs, calib)
    sc = cfg.sync
    lidar_peaks = detect_jump_peaks(traj.times, traj.positions[:, 2], sc.n_peaks, sc.min_separation, sc.peak_window)
    maps, report = {}, {"lidar_peaks": lidar_peaks, "persons": {}}
    wearer = cfg.person("wearer")
    order = [wearer] + [p for p in cfg.persons if p is not wearer]
    synced = {}
    for p in order:
        imu = inputs.imu[p.name]
        if sc.shared_clock and p is not wearer:
            cm, peaks = maps[wearer.name], None
        else:
            peaks = detect_jump_peaks(imu.timestamps, _imu_heights(imu, calib.R_WI), sc.n_peaks, sc.min_separation,
                                      sc.peak_window)
            cm = clock_map(peaks, lidar_peaks)
        maps[p.name] = cm
        seq, valid = synchronize_and_resample(imu, traj.times, cm)
        if not valid.all():
            log.warning("%s: %d scan times fall outside the IMU recording", p.name, int((~valid).sum()))
        synced[p.name] = seq
        save_motion(rec.path(f"sync/{p.name}.npz"), seq)
        report["persons"][p.name] = {"imu_peaks": peaks, "scale": cm.scale, "offset": cm.offset,
                                     "valid_frames": int(valid.sum())}
    write_json(rec.path("sync/sync.json"), report)
    return synced


def _world_boxes(boxes: list[list[Box]], rwl: np.ndarray) -> list[list[Box]]:
    rot, t = rwl[:3, :3], rwl[:3, 3]
    dyaw = float(np.arctan2(rot[1, 0], rot[0, 0]))
    return [[Box(b.center @ rot.T + t, b.size, b.yaw + dyaw, b.score, b.frame_id, b.label) for b in fb]
            for fb in boxes]


def _world_clouds(inputs: PipelineInputs, rwl: np.ndarray) -> list[np.ndarray]:
    rot, t = rwl[:3, :3], rwl[:3, 3]
    traj = inputs.trajectory
    out = []
    for k, c in enumerate(inputs.clouds):
        pts = c.points @ traj.rotations[k].T + traj.positions[k] if c.frame == "S" else c.points
        out.append(pts @ rot.T + t)
    return out


def stage_localize(cfg: PipelineConfig, inputs: PipelineInputs, calib: Calibration,
                   synced: dict[str, MotionSequence], rec: OutputRecorder) -> dict:
    """World-frame initial motions (and, for the second person, per-frame crops)."""
    traj, _ = _world(inputs, calib)
    if len(inputs.clouds) != len(traj):
        raise LidarMocapError("cloud and trajectory frame counts differ")
    rwi = np.asarray(calib.R_WI, float)
    summary = {}
    out = {}
    for p in cfg.persons:
        if p.role == "wearer":
            res = localize_first_person(inputs.model, synced[p.name], traj.positions, rwi, cfg.localization)
            summary[p.name] = {"role": p.role, "t_hl": res.t_hl.tolist(), "R_WI": res.R_WI.tolist(),
                               "yaw_corrections_deg": [float(x) for x in res.yaw_corrections_deg]}
        else:
            boxes = _world_boxes(inputs.boxes, np.asarray(calib.R_WL, float))
            if len(boxes) != len(traj):
                raise LidarMocapError("box and trajectory frame counts differ")
            res = localize_second_person(inputs.model, synced[p.name], boxes, _world_clouds(inputs, calib.R_WL),
                                         traj.positions, rwi, cfg.localization, traj.rotations, cfg.sensor.spec())
            crops = [c if c is not None else np.zeros((0, 3)) for c in res.crops]
            save_crops(rec.path(f"localize/{p.name}_crops.npz"), crops, res.visible, res.selected)
            summary[p.name] = {"role": p.role, "R_WI": res.R_WI.tolist(), "visible_frames": int(res.visible.sum()),
                               "yaw_corrections_deg": [float(x) for x in res.yaw_corrections_deg]}
        save_motion(rec.path(f"localize/{p.name}.npz"), res.motion)
        out[p.name] = res
    write_json(rec.path("localize/localization.json"), summary)
    return out


def _sequence_inputs(cfg: PipelineConfig, inputs: PipelineInputs, calib: Calibration, role: str,
                     t_hl=None, crops=None, visible=None) -> SequenceInputs:
    traj, scene = _world(inputs, calib)
    oc = cfg.optimization
    return SequenceInputs(inputs.model, scene=scene, crops=crops, visible=visible, lidar_positions=traj.positions,
                          lidar_rotations=traj.rotations, t_hl=None if t_hl is None else np.asarray(t_hl, float),
                          sensor=cfg.sensor.spec(), use_l2h=role == "wearer", use_point_cloud=role == "second",
                          options=oc.loss_options())


def _load_localized(cfg: PipelineConfig, out: Path, name: str):
    motion = load_motion(out / f"localize/{name}.npz")
    crops = visible = selected = None
    crop_file = out / f"localize/{name}_crops.npz"
    if crop_file.exists():
        crops, visible, selected = load_crops(crop_file)
    return motion, crops, visible, selected


def stage_optimize(cfg: PipelineConfig, inputs: PipelineInputs, calib: Calibration, rec: OutputRecorder
                   ) -> dict[str, tuple[MotionSequence, list[dict]]]:
    """Multi-stage windowed optimization of every person, starting from the localized motions."""
    out = Path(rec.root)
    summary = read_json(out / "localize/localization.json")
    oc = cfg.optimization
    results = {}
    for p in cfg.persons:
        init, crops, visible, _ = _load_localized(cfg, out, p.name)
        t_hl = summary[p.name].get("t_hl")
        seq_in = _sequence_inputs(cfg, inputs, calib, p.role, t_hl, crops, visible)
        motion, trace = optimize_sequence(init, seq_in, oc.stage_plan(), oc.window_plan(), oc.loss_weights())
        save_motion(rec.path(f"optimize/{p.name}.npz"), motion)
        write_text(rec.path(f"optimize/{p.name}_trace.jsonl"),
                   "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace))
        results[p.name] = (motion, trace)
    return results


def physical_terms(cfg: PipelineConfig, inputs: PipelineInputs, calib: Calibration, motion: MotionSequence,
                   role: str, t_hl=None, crops=None, visible=None) -> dict[str, float]:
    """Unweighted scene-collision and self-penetration values of a whole motion."""
    seq_in = _sequence_inputs(cfg, inputs, calib, role, t_hl, crops, visible)
    seq_in.beta, seq_in.theta_prior = motion.beta, motion.theta
    ctx = seq_in.context(0, motion.n_frames, motion.T, motion.R, motion.theta)
    names = [t for t in ("coll", "pen") if t in active_terms(ctx, LossWeights())]
    with torch.no_grad():
        vals = compute_terms(ctx, None, names)
    return {k: float(v) for k, v in vals.items()}


def stage_evaluate(cfg: PipelineConfig, inputs: PipelineInputs, calib: Calibration, rec: OutputRecorder) -> dict:
    """Metrics of the localized (baseline) and optimized motions, plus truth scores when available."""
    from .synthgen import score_against_truth

    out = Path(rec.root)
    summary = read_json(out / "localize/localization.json")
    traj, scene = _world(inputs, calib)
    report: dict = {}
    rows: dict[str, MetricReport] = {}
    truth_dir = cfg.resolve(cfg.paths.truth)
    truth_meta = read_json(truth_dir / "truth.json") if truth_dir is not None else {}
    for p in cfg.persons:
        base, crops, visible, selected = _load_localized(cfg, out, p.name)
        opt = load_motion(out / f"optimize/{p.name}.npz")
        entry = {}
        for tag, motion in (("baseline", base), ("optimized", opt)):
            kw = {}
            if p.role == "second":
                kw = dict(crops=crops, visible=visible, lidar_positions=traj.positions,
                          lidar_rotations=traj.rotations, sensor=cfg.sensor.spec())
            m = evaluate_motion(motion, inputs.model, scene,
                                start_equals_end=p.role == "wearer" and cfg.evaluation.start_equals_end, **kw)
            rows[f"{p.name}/{tag}"] = m
            e = {"metrics": m.as_dict(),
                 "terms": physical_terms(cfg, inputs, calib, motion, p.role, summary[p.name].get("t_hl"),
                                         crops, visible)}
            if truth_dir is not None and (truth_dir / f"{p.name}.npz").exists():
                e["truth"] = score_against_truth(motion, load_motion(truth_dir / f"{p.name}.npz"), inputs.model)
            entry[tag] = e
        if selected is not None and "true_box" in truth_meta:
            true_box = np.asarray(truth_meta["true_box"], np.int64)
            picked = selected >= 0
            entry["false_positive_selections"] = int(np.sum(picked & (selected != true_box)))
        report[p.name] = entry
    write_json(rec.path("evaluate/metrics.json"), report)
    write_text(rec.path("evaluate/metrics.txt"), format_report(rows) + "\n")
    if cfg.evaluation.plots:
        from .plots import write_plots

        write_plots(cfg, inputs, calib, rec)
    return report


def load_calibration(out: Path) -> Calibration:
    return Calibration.from_yaml((Path(out) / "calibration.yaml").read_text(encoding="utf-8"))


def load_synced(cfg: PipelineConfig, out: Path) -> dict[str, MotionSequence]:
    return {p.name: load_motion(Path(out) / f"sync/{p.name}.npz") for p in cfg.persons}


def _output_dir(cfg: PipelineConfig) -> Path:
    return cfg.resolve(cfg.paths.output)


def run_stage(cfg: PipelineConfig, stage: str, rec: OutputRecorder | None = None,
              inputs: PipelineInputs | None = None):
    """Run one stage, reading earlier results from the output directory."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    rec = rec or OutputRecorder(_output_dir(cfg))
    try:
        inputs = inputs or load_inputs(cfg)
        if stage == "calibrate":
            return stage_calibrate(cfg, inputs, rec)
        calib = load_calibration(rec.root)
        if stage == "sync":
            return stage_sync(cfg, inputs, calib, rec)
        if stage == "localize":
            return stage_localize(cfg, inputs, calib, load_synced(cfg, rec.root), rec)
        if stage == "optimize":
            return stage_optimize(cfg, inputs, calib, rec)
        return stage_evaluate(cfg, inputs, calib, rec)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def configure_runtime(cfg: PipelineConfig) -> None:
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)


def run_all(cfg: PipelineConfig) -> RunManifest:
    """Execute every stage in order and write the manifest.

    A failing stage raises :class:`StageError`; the manifest is still written
    and lists the outputs produced before the failure.
    """
    cfg.validate()
    configure_runtime(cfg)
    rec = OutputRecorder(_output_dir(cfg))
    manifest = RunManifest(cfg.snapshot_hash(),
                           {k: sha256_file(v) for k, v in sorted(input_files(cfg).items())})
    write_text(rec.path("config.yaml"), cfg.to_yaml())
    try:
        inputs = load_inputs(cfg)
        for stage in STAGES:
            t0 = time.perf_counter()
            log.info("stage %s", stage)
            run_stage(cfg, stage, rec, inputs)
            manifest.timings[stage] = time.perf_counter() - t0
    finally:
        manifest.outputs = rec.hashes()
        write_json(rec.root / MANIFEST, manifest.to_dict())
    return manifest


def run_single(cfg: PipelineConfig, stage: str):
    """Run one stage and merge its outputs into the manifest of the output directory."""
    cfg.validate()
    configure_runtime(cfg)
    rec = OutputRecorder(_output_dir(cfg))
    mpath = rec.root / MANIFEST
    if mpath.exists():
        manifest = RunManifest.from_dict(read_json(mpath))
        if manifest.config_hash != cfg.snapshot_hash():
            log.warning("configuration differs from the one recorded in %s", mpath)
            manifest.config_hash = cfg.snapshot_hash()
    else:
        manifest = RunManifest(cfg.snapshot_hash())
    manifest.inputs = {k: sha256_file(v) for k, v in sorted(input_files(cfg).items())}
    write_text(rec.path("config.yaml"), cfg.to_yaml())
    t0 = time.perf_counter()
    try:
        result = run_stage(cfg, stage, rec)
        manifest.timings[stage] = time.perf_counter() - t0
    finally:
        manifest.outputs.update(rec.hashes())
        write_json(mpath, manifest.to_dict())
    return result

"""Diagnostic figures written by the evaluate stage (PNG, byte-stable for identical data)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .body_model import forward_motion  # noqa: E402
from .formats import load_motion  # noqa: E402
from .metrics import acc_series, cd_foot_series, cd_v2p_series, fse_series  # noqa: E402

if TYPE_CHECKING:
    from .calib_sync import Calibration
    from .config import PipelineConfig
    from .pipeline import OutputRecorder, PipelineInputs

_META = {"Software": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_trajectories(tracks: dict[str, np.ndarray], path: Path) -> None:
    """Top view (x, y) of pelvis or sensor tracks."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for name, xyz in tracks.items():
        ax.plot(xyz[:, 0], xyz[:, 1], lw=1, label=name)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_trace(records: list[dict], path: Path) -> None:
    """Total loss per iteration, one line per window."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for w in sorted({r["window"] for r in records}):
        rs = [r for r in records if r["window"] == w]
        ax.plot([r["iteration"] for r in rs], [r["total"] for r in rs], lw=1, label=f"window {w}")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_series(series: dict[str, np.ndarray], times: np.ndarray, ylabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    for name, s in series.items():
        ax.plot(times[: len(s)], s, lw=0.8, label=name)
    ax.set_xlabel("time [s]")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    _save(fig, path)


def write_plots(cfg: "PipelineConfig", inputs: "PipelineInputs", calib: "Calibration", rec: "OutputRecorder"
                ) -> None:
    """Trajectory and loss-trace figures plus one time series per metric and person."""
    from .pipeline import _load_localized, _world

    out = Path(rec.root)
    traj, scene = _world(inputs, calib)
    tracks = {"lidar": traj.positions}
    for p in cfg.persons:
        base, crops, visible, _ = _load_localized(cfg, out, p.name)
        opt = load_motion(out / f"optimize/{p.name}.npz")
        tracks[f"{p.name} baseline"] = base.T
        tracks[f"{p.name} optimized"] = opt.T
        trace_file = out / f"optimize/{p.name}_trace.jsonl"
        records = [json.loads(line) for line in trace_file.read_text(encoding="utf-8").splitlines() if line]
        if records:
            plot_trace(records, rec.path(f"evaluate/{p.name}_loss.png"))
        verts = {"baseline": forward_motion(inputs.model, base)[0], "optimized": forward_motion(inputs.model, opt)[0]}
        fse = {tag: fse_series(v, inputs.model) * 1000.0 for tag, v in verts.items()}
        plot_series(fse, traj.times[1:], "foot sliding [mm]", rec.path(f"evaluate/{p.name}_fse.png"))
        cd = {tag: cd_foot_series(v, inputs.model, scene) * 1000.0 for tag, v in verts.items()}
        plot_series(cd, traj.times, "stable foot to ground [mm]", rec.path(f"evaluate/{p.name}_cd_foot.png"))
        dt = 1.0 / opt.fps
        acc = {tag: acc_series(m.T, dt) for tag, m in (("baseline", base), ("optimized", opt))}
        plot_series(acc, traj.times[1:-1], "pelvis acceleration [m/s^2]", rec.path(f"evaluate/{p.name}_acc.png"))
        if crops is not None:
            v2p = {tag: cd_v2p_series(v, crops, visible, traj.positions, traj.rotations, cfg.sensor.spec()) * 1000.0
                   for tag, v in verts.items()}
            plot_series(v2p, traj.times, "vertex to crop [mm]", rec.path(f"evaluate/{p.name}_cd_v2p.png"))
    plot_trajectories(tracks, rec.path("evaluate/trajectories.png"))

import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

import helpers
from lidarmocap.bundle import write_bundle
from lidarmocap.capsule_body import build_capsule_body
from lidarmocap.config import PipelineConfig, load_config
from lidarmocap.formats import read_json
from lidarmocap.geometry.raycast import LidarSpec
from lidarmocap.pipeline import RunManifest, run_all
from lidarmocap.synthgen import ScenarioSpec, generate


@pytest.fixture(scope="session")
def capsule():
    return build_capsule_body()


@pytest.fixture(scope="session")
def small_bundle(capsule):
    """20 s two-person session with a coarse sensor, shared by several modules."""
    return generate(ScenarioSpec(duration=20.0, seed=3, lidar=LidarSpec(n_beams=64, n_columns=512)), capsule)


@dataclass
class Run:
    cfg: PipelineConfig
    out: Path
    manifest: RunManifest
    metrics: dict
    seconds: float


def run_scenario(directory: Path, spec: ScenarioSpec, model) -> Run:
    """Write a synthetic bundle and run the whole pipeline on it."""
    cfg = load_config(write_bundle(generate(spec, model), directory))
    t0 = time.perf_counter()
    manifest = run_all(cfg)
    seconds = time.perf_counter() - t0
    out = cfg.resolve(cfg.paths.output)
    return Run(cfg, out, manifest, read_json(out / "evaluate/metrics.json"), seconds)


@pytest.fixture(scope="session")
def two_person_run(tmp_path_factory, capsule):
    """20 s two-person session with default corruption, run twice on the same inputs.

    Returns the first run and the manifest of the second. The first run's
    outputs are kept under ``out_first``.
    """
    root = tmp_path_factory.mktemp("two_person")
    first = run_scenario(root, ScenarioSpec(duration=20.0, seed=0), capsule)
    kept = root / "out_first"
    shutil.move(first.out, kept)
    t0 = time.perf_counter()
    second = run_all(first.cfg)
    rerun_seconds = time.perf_counter() - t0
    first.out = kept
    return first, second, rerun_seconds


@pytest.fixture(scope="session")
def wearer_run(tmp_path_factory, capsule):
    """60 s wearer-only walk: 0.25 deg/s heading drift (15 deg), flat-ground IMU, exact LiDAR trajectory."""
    spec = ScenarioSpec(duration=60.0, seed=0, second_person=False, trajectory_noise=0.0)
    return run_scenario(tmp_path_factory.mktemp("wearer"), spec, capsule)


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(helpers.ACCEPTANCE):
        terminalreporter.write_line(helpers.ACCEPTANCE[n])

"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, default_config_yaml, load_config
from .errors import ConfigError, LidarMocapError

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2

log = logging.getLogger("lidarmocap")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML configuration (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--threads", type=int, help="override the configured thread count")
    p.add_argument("--out", type=Path, help="override the output directory")
    p.add_argument("--log-level", help="override the configured log level")


def _calibration_flags(p: argparse.ArgumentParser) -> None:
    box = ("LO_X", "LO_Y", "LO_Z", "HI_X", "HI_Y", "HI_Z")
    p.add_argument("--ground-hint", type=float, nargs=6, metavar=box,
                   help="first-scan box (sensor frame) holding only ground points")
    p.add_argument("--marker-hint", type=float, nargs=6, metavar=box,
                   help="first-scan box (sensor frame) holding only marker-plane points")
    p.add_argument("--height", type=float, help="sensor height above the ground in the first scan (m)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarmocap", description=__doc__.splitlines()[0])
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective configuration (every default when no --config) and exit")
    parser.add_argument("--config", type=Path, dest="top_config", help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command")
    for name, text in (("calibrate", "fit the map-to-world transform"),
                       ("sync", "align and resample the IMU tracks"),
                       ("localize", "initial world motions of both persons"),
                       ("optimize", "multi-stage joint optimization"),
                       ("evaluate", "metrics, truth scores and plots"),
                       ("run-all", "every stage in order, with a manifest")):
        sp = sub.add_parser(name, help=text)
        _common(sp)
        if name in ("calibrate", "run-all"):
            _calibration_flags(sp)
    s = sub.add_parser("synth", help="write a synthetic session with ground truth")
    s.add_argument("--out", type=Path, required=True, help="bundle directory")
    s.add_argument("--duration", type=float, default=20.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--wearer-only", action="store_true", help="omit the second person")
    s.add_argument("--clean", action="store_true", help="no IMU or detection corruption")
    s.add_argument("--threads", type=int, default=1)
    c = sub.add_parser("convert-smpl", help="convert an SMPL-layout parameter file to a model archive")
    c.add_argument("src", type=Path)
    c.add_argument("dst", type=Path)
    return parser


def effective_config(args) -> PipelineConfig:
    path = getattr(args, "config", None) or getattr(args, "top_config", None)
    cfg = load_config(path) if path is not None else PipelineConfig()
    for key in ("seed", "threads"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    if getattr(args, "out", None) is not None:
        cfg.paths.output = str(args.out.resolve())
    if getattr(args, "log_level", None):
        cfg.log_level = args.log_level
    for flag, hint in (("ground_hint", cfg.calibration.ground_hint), ("marker_hint", cfg.calibration.marker_hint)):
        box = getattr(args, flag, None)
        if box is not None:
            hint.lo, hint.hi = list(box[:3]), list(box[3:])
    if getattr(args, "height", None) is not None:
        cfg.calibration.height = args.height
    return cfg


def _synth(args) -> None:
    import torch

    from .bundle import write_bundle
    from .capsule_body import build_capsule_body
    from .synthgen import ScenarioSpec, generate

    if args.duration <= 0:
        raise ConfigError("--duration must be positive")
    torch.set_num_threads(args.threads)
    spec = ScenarioSpec(duration=args.duration, seed=args.seed, second_person=not args.wearer_only)
    if args.clean:
        spec = clean_spec(spec)
    path = write_bundle(generate(spec, build_capsule_body()), args.out)
    print(path)


def clean_spec(spec):
    """Same scenario without IMU or detection corruption."""
    import dataclasses

    return dataclasses.replace(spec, heading_drift_rate=0.0, heading_bias_deg=(0.0, 0.0), translation_walk=0.0,
                               flat_ground=False, box_miss_rate=0.0, false_positives=0, box_center_noise=0.0,
                               box_size_noise=0.0)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config or args.command is None:
            if args.command is None and not args.print_config:
                parser.print_help()
                return EXIT_VALIDATION
            cfg_path = getattr(args, "config", None) or args.top_config
            sys.stdout.write(load_config(cfg_path).to_yaml() if cfg_path else default_config_yaml())
            return EXIT_OK
        if args.command == "synth":
            _synth(args)
            return EXIT_OK
        if args.command == "convert-smpl":
            from .body_model import convert_smpl_file

            if not args.src.exists():
                raise ConfigError(f"input does not exist: {args.src}")
            convert_smpl_file(args.src, args.dst)
            return EXIT_OK
        from . import pipeline

        cfg = effective_config(args)
        logging.getLogger().setLevel(cfg.log_level.upper() if isinstance(
            logging.getLevelName(cfg.log_level.upper()), int) else logging.INFO)
        cfg.validate()
        if args.command == "run-all":
            manifest = pipeline.run_all(cfg)
            print(manifest.output_hash())
        else:
            pipeline.run_single(cfg, args.command)
        return EXIT_OK
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_VALIDATION
    except LidarMocapError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # unexpected failures are runtime errors, with the traceback logged
        log.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())

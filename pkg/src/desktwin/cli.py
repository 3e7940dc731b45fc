"""Command-line entry point: stage subcommands plus an end-to-end run."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import pipeline
from .errors import DesktwinError, ManifestError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2

STAGES = ("calibrate", "build-scene", "train", "evaluate")


def _load_manifest(args) -> pipeline.PipelineManifest:
    manifest = pipeline.PipelineManifest.load(args.manifest)
    if args.seed is not None:
        manifest.seed = args.seed
    if args.out is not None:
        manifest.output_dir = args.out
    if getattr(args, "iterations", None) is not None:
        manifest.train["iterations"] = args.iterations
    n_threads = os.environ.get("PW_THREADS")
    if n_threads:
        ppo = manifest.train.setdefault("ppo", {})
        ppo["n_envs"] = min(int(ppo.get("n_envs", 8)), max(int(n_threads), 1))
    return manifest


def _stage_outputs(manifest: pipeline.PipelineManifest, stage: str) -> list:
    out = manifest.out
    return {
        "calibrate": [out / "calibrated" / "calibration.json"],
        "build-scene": [out / "scene" / "scene_model.json"],
        "train": [out / "policy" / "policy.pwpl"],
        "evaluate": [out / "eval" / "success_report.json"],
    }[stage]


def _inputs_mtime(manifest: pipeline.PipelineManifest) -> float:
    paths = [
        *(manifest.resolve(p) for p in manifest.depth_sequence),
        manifest.resolve(manifest.reference_depth),
        manifest.resolve(manifest.scene_config),
        manifest.resolve(manifest.trajectory),
    ]
    return max(p.stat().st_mtime for p in paths)


def _run_stage(manifest, stage: str, args) -> dict:
    if stage == "calibrate":
        return pipeline.cmd_calibrate(manifest)
    if stage == "build-scene":
        return pipeline.cmd_build_scene(manifest)
    if stage == "train":
        return pipeline.cmd_train(manifest)
    if stage == "evaluate":
        return pipeline.cmd_evaluate(
            manifest,
            checkpoint=getattr(args, "checkpoint", None),
            episodes=getattr(args, "episodes", 10) or 10,
        )
    raise ValueError(stage)


def cmd_run(manifest, args) -> int:
    for stage in STAGES:
        if args.resume:
            outputs = _stage_outputs(manifest, stage)
            if all(p.exists() for p in outputs):
                newest_input = _inputs_mtime(manifest)
                if all(p.stat().st_mtime >= newest_input for p in outputs):
                    print(f"[{stage}] up to date, skipped")
                    continue
        try:
            report = _run_stage(manifest, stage, args)
        except DesktwinError as exc:
            print(f"stage {stage} failed: {exc}", file=sys.stderr)
            raise
        print(f"[{stage}] done: {json.dumps(report, default=str)[:200]}")
    return EXIT_OK


def cmd_replay(args) -> int:
    log = Path(args.log)
    if not log.exists():
        raise ManifestError(f"episode log not found: {log}")
    rows = ["step,ee_px,ee_py,ee_pz,ee_qw,ee_qx,ee_qy,ee_qz,obj_px,obj_py,obj_pz,obj_qw,obj_qx,obj_qy,obj_qz"]
    for line in log.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        # format: step EE <7 floats> OBJ <7 floats>
        step = parts[0]
        ee = parts[2:9]
        obj = parts[10:17]
        rows.append(",".join([step, *ee, *obj]))
    out = Path(args.csv) if args.csv else log.with_suffix(".csv")
    out.write_text("\n".join(rows) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desktwin",
        description="Scene grounding and residual-policy training pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest_required=True):
        p.add_argument("--manifest", required=manifest_required, help="pipeline manifest JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")

    for name in ("calibrate", "build-scene", "run"):
        p = sub.add_parser(name)
        common(p)
        if name == "run":
            p.add_argument("--resume", action="store_true")
            p.add_argument("--iterations", type=int, default=None)
            p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("train")
    common(p)
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("replay")
    p.add_argument("--log", required=True, help="episode log (.pwtj)")
    p.add_argument("--csv", default=None, help="output CSV path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        manifest = _load_manifest(args)
        if args.command == "run":
            return cmd_run(manifest, args)
        report = _run_stage(manifest, args.command, args)
        print(json.dumps(report, indent=2, default=str))
        return EXIT_OK
    except (ManifestError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DesktwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

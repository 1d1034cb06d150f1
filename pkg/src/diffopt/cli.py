"""Batch command-line front end.

Subcommands: train-prior, make-scene, reconstruct, evaluate, plot. Every
command takes an --out directory, writes its artifacts plus one
manifest.json, and is reproducible for a fixed seed. Exit codes: 0 success,
1 usage/input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .camera import CameraCorrection
from .diffusion import (
    corpus_hash,
    load_checkpoint,
    make_schedule,
    sample_motion,
    save_checkpoint,
    train_denoiser,
)
from .kinematics import build_default_skeleton, load_skeleton, save_skeleton
from .metrics import evaluate as evaluate_metrics
from .metrics import format_results_table, save_results_csv
from .motionfield import MotionSequence, load_motion_csv
from .optimizer import ABLATION_MODES, StageConfig, load_config, save_report, solve
from .plots import loss_curve_svg, trajectory_png, trajectory_svg
from .synthdata import (
    SCENARIO_KINDS,
    CAMERA_PATHS,
    CorruptionSpec,
    ScenarioSpec,
    load_scene_bundle,
    make_scene,
    save_scene_bundle,
)

ENV_THREADS = "DIFFOPT_THREADS"


def _version_string() -> str:
    return f"diffopt-{__version__}"


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out_dir, command: str, seed, config_obj, inputs: dict, outputs: list,
                   wall_time: float, extra: dict | None = None):
    doc = {
        "command": command,
        "version": _version_string(),
        "seed": seed,
        "config_hash": _config_hash(config_obj),
        "inputs": inputs,
        "artifacts": sorted(str(p) for p in outputs),
        "wall_time_s": wall_time,
    }
    if extra:
        doc.update(extra)
    Path(out_dir, "manifest.json").write_text(json.dumps(doc, indent=2))


def _job_cap(requested: int) -> int:
    cap = os.environ.get(ENV_THREADS)
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {cap!r}")
    return max(1, requested)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_prior(args) -> int:
    from .synthdata import build_corpus

    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skel = build_default_skeleton()
    corpus = build_corpus(args.corpus_size, skel, args.corpus_seed)
    sched = make_schedule(args.steps)
    den, curve = train_denoiser(corpus, sched, epochs=args.epochs, seed=args.corpus_seed)
    manifest = {
        "seed": args.corpus_seed,
        "epochs": args.epochs,
        "corpus_size": args.corpus_size,
        "corpus_hash": corpus_hash(corpus),
        "trained": den.trained,
        "loss_curve": curve,
    }
    ckpt = out / "prior.dopt"
    save_checkpoint(den, sched, ckpt, manifest)
    save_skeleton(skel, out / "skeleton.json")
    curve_csv = out / "loss_curve.csv"
    with curve_csv.open("w", newline="") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{float(v)!r}\n")
    write_manifest(
        out, "train-prior", args.corpus_seed,
        {"epochs": args.epochs, "corpus_size": args.corpus_size, "steps": args.steps},
        {}, [ckpt.name, "skeleton.json", "loss_curve.csv"],
        time.perf_counter() - t0,
        extra={"trained": den.trained},
    )
    print(f"wrote {ckpt} ({'trained' if den.trained else 'untrained'})")
    return 0


def _parse_corruption(spec: str) -> CorruptionSpec:
    if spec == "default":
        return CorruptionSpec()
    if spec == "none":
        return CorruptionSpec.none()
    doc = json.loads(Path(spec).read_text())
    c = CorruptionSpec(**doc)
    c.validate()
    return c


def cmd_make_scene(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    skel = build_default_skeleton()
    scenario = ScenarioSpec(
        kind=args.scenario, T=args.frames, fps=args.fps, seed=args.seed,
        camera_path=args.camera_path, jitter_amplitude=args.jitter,
    )
    scenario.validate()
    corruption = _parse_corruption(args.corruption)
    scene = make_scene(scenario, corruption, skel)
    save_scene_bundle(scene, out)
    save_skeleton(skel, out / "skeleton.json")
    write_manifest(
        out, "make-scene", args.seed,
        {"scenario": asdict(scenario), "corruption": asdict(corruption)},
        {}, ["scene.json", "gt_motion.csv", "gt_camera.json", "camera.json",
             "keypoints.csv", "init_motion.csv", "skeleton.json"],
        time.perf_counter() - t0,
    )
    print(f"wrote scene bundle to {out}")
    return 0


def _solve_one(scene_dir: str, prior_dir: str, cfg: StageConfig, mode: str, out_dir: str):
    skel_path = Path(scene_dir) / "skeleton.json"
    skel = load_skeleton(skel_path) if skel_path.exists() else build_default_skeleton()
    scene = load_scene_bundle(scene_dir, skel)
    den, sched = load_checkpoint(Path(prior_dir) / "prior.dopt")
    if cfg.lambda_diff > 0 and not den.trained and mode != "no-mdm":
        raise ValueError(
            "prior checkpoint is untrained but the diffusion term is enabled; "
            "train the prior or set lambda_diff to 0"
        )
    report = solve(scene.instance, (den, sched), cfg, mode=mode)
    save_report(report, out_dir)
    return report


def cmd_reconstruct(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config) if args.config else StageConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    if not Path(args.prior, "prior.dopt").exists():
        raise ValueError(f"no prior checkpoint found under {args.prior} (expected prior.dopt)")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.batch:
        scene_dirs = sorted(p for p in Path(args.batch).iterdir() if (p / "scene.json").exists())
        if not scene_dirs:
            raise ValueError(f"no scene bundles found under {args.batch}")
        jobs = _job_cap(args.jobs)
        results = []
        if jobs == 1:
            for sd in scene_dirs:
                _solve_one(str(sd), args.prior, cfg, args.ablation, str(out / sd.name))
                results.append(sd.name)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futs = {
                    pool.submit(_solve_one, str(sd), args.prior, cfg, args.ablation,
                                str(out / sd.name)): sd.name
                    for sd in scene_dirs
                }
                for fut, name in futs.items():
                    fut.result()
                    results.append(name)
        write_manifest(
            out, "reconstruct", cfg.seed, cfg.to_dict(),
            {"batch": str(args.batch), "prior": str(args.prior), "ablation": args.ablation},
            results, time.perf_counter() - t0,
        )
        print(f"solved {len(results)} scenes into {out}")
        return 0

    if not args.scene:
        raise ValueError("reconstruct needs --scene (or --batch)")
    _solve_one(args.scene, args.prior, cfg, args.ablation, str(out))
    write_manifest(
        out, "reconstruct", cfg.seed, cfg.to_dict(),
        {"scene": str(args.scene), "prior": str(args.prior), "ablation": args.ablation},
        ["motion.csv", "report.json"], time.perf_counter() - t0,
    )
    print(f"wrote recovery to {out}")
    return 0


def _load_run_and_scene(run_dir, scene_dir):
    skel_path = Path(scene_dir) / "skeleton.json"
    skel = load_skeleton(skel_path) if skel_path.exists() else build_default_skeleton()
    scene = load_scene_bundle(scene_dir, skel)
    pred = load_motion_csv(Path(run_dir) / "motion.csv")
    if pred.T != scene.gt.T:
        raise ValueError(
            f"run and scene disagree: recovered motion has {pred.T} frames, scene has {scene.gt.T}"
        )
    return skel, scene, pred


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    skel, scene, pred = _load_run_and_scene(args.run, args.scene)
    init_seq = MotionSequence(
        scene.instance.theta_init, scene.instance.phi_init, scene.instance.x_init, scene.instance.fps
    )
    rows = {
        "init": evaluate_metrics(init_seq, scene.gt, skel).row(),
        "recovered": evaluate_metrics(pred, scene.gt, skel).row(),
    }
    out_csv = Path(args.out)
    out_dir = out_csv.parent if out_csv.suffix else out_csv
    out_dir.mkdir(parents=True, exist_ok=True)
    if not out_csv.suffix:
        out_csv = out_csv / "eval.csv"
    save_results_csv(rows, out_csv)
    table = format_results_table(rows, reference="recovered")
    out_csv.with_suffix(".txt").write_text(table + "\n")
    write_manifest(
        out_dir, "evaluate", None, {"run": str(args.run), "scene": str(args.scene)},
        {"run": str(args.run), "scene": str(args.scene)},
        [out_csv.name, out_csv.with_suffix(".txt").name],
        time.perf_counter() - t0,
    )
    print(table)
    return 0


def cmd_plot(args) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    scene_dir = args.scene
    if scene_dir is None:
        manifest = json.loads((run / "manifest.json").read_text())
        scene_dir = manifest.get("inputs", {}).get("scene")
        if not scene_dir:
            raise ValueError("run manifest does not record a scene; pass --scene")
    skel, scene, pred = _load_run_and_scene(run, scene_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    trajectory_svg(scene.gt.x_seq, pred.x_seq, out / "trajectory.svg")
    trajectory_png(scene.gt.x_seq, pred.x_seq, out / "trajectory.png")
    artifacts += ["trajectory.svg", "trajectory.png"]
    for curve_csv in sorted(run.glob("curve_*.csv")):
        name = curve_csv.stem.replace("curve_", "")
        vals = np.loadtxt(curve_csv, delimiter=",", skiprows=1, usecols=1, ndmin=1)
        svg = out / f"loss_{name}.svg"
        loss_curve_svg(vals, svg, title=name)
        artifacts.append(svg.name)
    write_manifest(
        out, "plot", None, {"run": str(run)}, {"run": str(run), "scene": str(scene_dir)},
        artifacts, time.perf_counter() - t0,
    )
    print(f"wrote {len(artifacts)} figures to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors exit 1 (argparse defaults to 2, which we reserve
        # for numerical failures)
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffopt", description=__doc__)
    p.add_argument("--version", action="version", version=_version_string())
    sub = p.add_subparsers(dest="command", required=True)

    tp = sub.add_parser("train-prior", help="build the gait corpus and train the denoiser")
    tp.add_argument("--corpus-seed", type=int, default=0)
    tp.add_argument("--epochs", type=int, default=200)
    tp.add_argument("--corpus-size", type=int, default=200)
    tp.add_argument("--steps", type=int, default=100, help="diffusion steps")
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_train_prior)

    ms = sub.add_parser("make-scene", help="generate a synthetic scene bundle")
    ms.add_argument("--scenario", choices=SCENARIO_KINDS, default="walk-line")
    ms.add_argument("--corruption", default="default",
                    help="'default', 'none', or a JSON file of corruption fields")
    ms.add_argument("--camera-path", choices=CAMERA_PATHS, default="static")
    ms.add_argument("--jitter", type=float, default=0.0)
    ms.add_argument("--frames", type=int, default=100)
    ms.add_argument("--fps", type=float, default=30.0)
    ms.add_argument("--seed", type=int, default=0)
    ms.add_argument("--out", required=True)
    ms.set_defaults(func=cmd_make_scene)

    rc = sub.add_parser("reconstruct", help="recover motion + camera from a scene")
    rc.add_argument("--scene")
    rc.add_argument("--batch", help="directory of scene bundles to solve")
    rc.add_argument("--jobs", type=int, default=1)
    rc.add_argument("--prior", required=True)
    rc.add_argument("--config", help="StageConfig as JSON (or TOML on Python >= 3.11)")
    rc.add_argument("--ablation", choices=ABLATION_MODES, default="full")
    rc.add_argument("--seed", type=int, default=None)
    rc.add_argument("--out", required=True)
    rc.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("evaluate", help="metrics for a run against its scene")
    ev.add_argument("--run", required=True)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", help="trajectory and loss-curve figures for a run")
    pl.add_argument("--run", required=True)
    pl.add_argument("--scene", default=None)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

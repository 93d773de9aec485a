"""Command-line surface.

Exit codes: 0 success, 1 validation failure (bad arguments, config, or
file contents), 2 numeric abort (non-finite training state or a failed
numeric verification gate).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from ..numerics import NumericAbort, load_blocks
from .checks import SUITES, run_suites
from .config import (
    ConfigError,
    PipelineConfig,
    apply_head_variant,
    desk_config,
    kitti_reference_config,
    load_config,
    save_config,
)
from .evaluate import run_evaluation
from .fuzz import iou_fuzz
from .model import Detector
from .scenes import (
    GenerationError,
    generate_synthetic_scene,
    load_scene,
    load_scenes,
    save_scene,
)
from .train import run_training

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit_Validation(message)


class SystemExit_Validation(Exception):
    pass


def _load_cfg(path: str | None, variant: str | None = None) -> PipelineConfig:
    cfg = load_config(path) if path else desk_config()
    if variant:
        cfg = apply_head_variant(cfg, variant)
    seed = os.environ.get("M3FUSE_SEED")
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    workers = os.environ.get("M3FUSE_WORKERS")
    if workers is not None:
        cfg = dataclasses.replace(cfg, train_workers=int(workers))
    return cfg


def _build_parser() -> _Parser:
    p = _Parser(prog="m3fuse", description="Desk-scale 3D detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=20)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--write-config", action="store_true", help="also save the config used")
    g.add_argument("--reference-config", action="store_true", help="start from the full-scale reference config")

    t = sub.add_parser("train", help="train on a scene directory")
    t.add_argument("--config")
    t.add_argument("--scenes", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--resume", help="state path prefix written by a previous run")
    t.add_argument("--variant", choices=["2x4", "1x8"])

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--variant", choices=["2x4", "1x8"])

    gc = sub.add_parser("gradcheck", help="finite-difference every differentiable module")
    gc.add_argument("--suite", action="append", choices=sorted(SUITES), help="run a subset")
    gc.add_argument("--tol", type=float, default=1e-4)

    f = sub.add_parser("iou-fuzz", help="geometry vs Monte-Carlo oracle")
    f.add_argument("--pairs", type=int, default=10_000)
    f.add_argument("--samples", type=int, default=200_000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--tol", type=float, default=3e-3)

    d = sub.add_parser("demo", help="single-scene inference dump")
    d.add_argument("--config")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--scenes", required=True)
    d.add_argument("--scene-id", required=True)

    pd = sub.add_parser("plot-data", help="emit plot-ready loss/PR CSV data")
    pd.add_argument("--loss-csv")
    pd.add_argument("--metrics-dir", help="evaluation output directory holding pr_curve.csv")
    pd.add_argument("--out", required=True)
    pd.add_argument("--window", type=int, default=20)
    return p


def _cmd_gen(args) -> int:
    if args.reference_config:
        cfg = kitti_reference_config()
        env_seed = os.environ.get("M3FUSE_SEED")
        if env_seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(env_seed))
    else:
        cfg = _load_cfg(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_synthetic_scene(cfg, seed=cfg.seed * 100_000 + i, scene_id=f"scene_{i:04d}")
        save_scene(out, scene, cfg.class_names)
    if args.write_config:
        save_config(cfg, out / "config.cfg")
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_cfg(args.config, args.variant)
    scenes = load_scenes(args.scenes, cfg.class_names)
    if not scenes:
        raise SystemExit_Validation(f"no scenes found in {args.scenes}")
    result = run_training(
        cfg,
        scenes,
        args.out,
        max_steps=args.steps,
        resume_from=args.resume,
        workers=args.workers,
        log=print,
    )
    print(f"ran {result.steps_run} steps; checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args.config, args.variant)
    scenes = load_scenes(args.scenes, cfg.class_names)
    if not scenes:
        raise SystemExit_Validation(f"no scenes found in {args.scenes}")
    rows = run_evaluation(cfg, args.checkpoint, scenes, args.out)
    for cname, scope, metric, value in rows:
        print(f"{cname:10s} {scope:10s} {metric:24s} {value:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_suites(args.suite)
    worst = 0.0
    for name, report in results:
        status = "PASS" if report.max_rel_err < args.tol and not report.non_finite else "FAIL"
        print(f"{status}  {name:20s} max rel err {report.max_rel_err:.3e} over {report.n_coords} coords")
        worst = max(worst, report.max_rel_err)
        if report.non_finite:
            print(f"      non-finite comparisons: {len(report.non_finite)}")
    print(f"overall max rel err {worst:.3e} (tolerance {args.tol:g})")
    if worst >= args.tol or any(r.non_finite for _, r in results):
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_iou_fuzz(args) -> int:
    result = iou_fuzz(args.pairs, args.samples, args.seed)
    print(result)
    ok = (
        result.max_bev_err < args.tol
        and result.max_3d_err < args.tol
        and result.max_roundtrip_coord_err < 1e-9
        and result.max_roundtrip_dim_rel_err < 1e-9
        and result.max_roundtrip_theta_err < 1e-9
    )
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_demo(args) -> int:
    cfg = _load_cfg(args.config)
    scene = load_scene(args.scenes, args.scene_id, cfg.class_names)
    model = Detector(cfg)
    model.params.load_arrays(load_blocks(args.checkpoint))
    dets = model.detect_scene(scene)
    from ..detect import format_detection_line

    for det in dets:
        print(format_detection_line(det, cfg.class_names))
    print(f"# {len(dets)} detections in {args.scene_id}", file=sys.stderr)
    return EXIT_OK


def _cmd_plot_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.loss_csv:
        rows = Path(args.loss_csv).read_text().splitlines()[1:]
        steps, totals = [], []
        for row in rows:
            parts = row.split(",")
            steps.append(int(parts[0]))
            totals.append(float(parts[5]))
        lines = ["step,total,moving_avg"]
        for i, (s, t) in enumerate(zip(steps, totals)):
            lo = max(0, i - args.window + 1)
            avg = float(np.mean(totals[lo : i + 1]))
            lines.append(f"{s},{t:.9e},{avg:.9e}")
        (out / "loss_curve.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / 'loss_curve.csv'}")
    if args.metrics_dir:
        src = Path(args.metrics_dir) / "pr_curve.csv"
        if not src.exists():
            raise SystemExit_Validation(f"no pr_curve.csv in {args.metrics_dir}")
        (out / "pr_curve.csv").write_bytes(src.read_bytes())
        print(f"wrote {out / 'pr_curve.csv'}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "iou-fuzz": _cmd_iou_fuzz,
    "demo": _cmd_demo,
    "plot-data": _cmd_plot_data,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit_Validation as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, GenerationError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

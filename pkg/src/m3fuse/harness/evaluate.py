"""Evaluation driver: run inference over scenes, serialize detections,
and emit metric tables plus plot-ready precision-recall data."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from ..detect import Detection, format_detection_line
from ..metrics import (
    GroundTruthBox,
    UndefinedApError,
    average_precision,
    build_pr_curve,
    difficulty_ap,
    filter_level,
    map_with_heading,
    match_detections,
)
from ..numerics import load_blocks
from .config import PipelineConfig
from .model import Detector
from .scenes import Scene

METRICS_CSV_HEADER = "class,scope,metric,value"


def run_inference(model: Detector, scenes: Sequence[Scene]) -> List[List[Detection]]:
    return [model.detect_scene(s) for s in scenes]


def write_detections(out_dir, scenes: Sequence[Scene], dets: Sequence[Sequence[Detection]], class_names) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for scene, scene_dets in zip(scenes, dets):
        lines = [format_detection_line(d, class_names) for d in scene_dets]
        (out / f"det_{scene.scene_id}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def compute_metric_rows(
    cfg: PipelineConfig,
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruthBox]],
) -> List[Tuple[str, str, str, float]]:
    rows: List[Tuple[str, str, str, float]] = []
    thr = cfg.eval_iou_threshold
    kind = cfg.eval_iou_kind
    for cid, cname in enumerate(cfg.class_names):
        for scope in ("all", "easy", "moderate", "hard"):
            for mode in ("R11", "R40"):
                try:
                    ap = difficulty_ap(dets, gts, cid, scope, thr, kind, mode)
                except UndefinedApError:
                    continue
                rows.append((cname, scope, f"ap_{mode.lower()}_{kind}@{thr:g}", ap))
    for level in (1, 2):
        try:
            m_ap, m_aph = map_with_heading(
                dets, gts, cfg.eval_level_iou_threshold, level, cfg.eval_level_iou_kind, "R40"
            )
        except UndefinedApError:
            continue
        thr2 = cfg.eval_level_iou_threshold
        rows.append(("all", f"LEVEL_{level}", f"map_{cfg.eval_level_iou_kind}@{thr2:g}", m_ap))
        rows.append(("all", f"LEVEL_{level}", f"maph_{cfg.eval_level_iou_kind}@{thr2:g}", m_aph))
    return rows


def write_metrics_csv(path, rows: Sequence[Tuple[str, str, str, float]]) -> None:
    lines = [METRICS_CSV_HEADER]
    for cname, scope, metric, value in rows:
        lines.append(f"{cname},{scope},{metric},{value:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_pr_curve(
    path,
    cfg: PipelineConfig,
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruthBox]],
    class_id: int = 0,
) -> None:
    """Plot-ready (recall, precision) pairs for one class over all scenes."""
    scores: List[float] = []
    flags: List[bool] = []
    n_gt = 0
    for scene_dets, scene_gts in zip(dets, gts):
        class_dets = [d for d in scene_dets if d.class_id == class_id]
        class_gt_idx = [i for i, g in enumerate(scene_gts) if g.class_id == class_id]
        n_gt += len(class_gt_idx)
        res = match_detections(class_dets, scene_gts, cfg.eval_iou_threshold, cfg.eval_iou_kind)
        for i, d in enumerate(class_dets):
            scores.append(d.confidence)
            flags.append(bool(res.tp_flags[i]))
    lines = ["recall,precision"]
    if n_gt > 0 and scores:
        curve = build_pr_curve(scores, flags, n_gt)
        for r, p in zip(curve.recall, curve.precision):
            lines.append(f"{r:.9f},{p:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_evaluation(
    cfg: PipelineConfig,
    checkpoint_path,
    scenes: Sequence[Scene],
    out_dir,
    model: Optional[Detector] = None,
) -> List[Tuple[str, str, str, float]]:
    """Load a checkpoint, run inference, and write all output files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = Detector(cfg)
        model.params.load_arrays(load_blocks(checkpoint_path))
    dets = run_inference(model, scenes)
    gts = [s.gts for s in scenes]
    write_detections(out / "detections", scenes, dets, cfg.class_names)
    rows = compute_metric_rows(cfg, dets, gts)
    write_metrics_csv(out / "metrics.csv", rows)
    write_pr_curve(out / "pr_curve.csv", cfg, dets, gts)
    return rows


def metric_value(rows: Sequence[Tuple[str, str, str, float]], cname: str, scope: str, metric: str) -> float:
    for r in rows:
        if r[0] == cname and r[1] == scope and r[2] == metric:
            return r[3]
    raise KeyError(f"metric row ({cname}, {scope}, {metric}) not found")

"""Detection metrics: greedy matching, interpolated average precision at
11/40 recall positions, point-count difficulty levels with heading-weighted
AP, and size/occlusion/truncation difficulty buckets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detect import Detection
from .geometry import Box7, iou_3d, iou_bev, wrap_angle


class UndefinedApError(ValueError):
    """AP requested with zero ground-truth boxes."""


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box7
    class_id: int
    points_inside: int = 0
    height_px: float = 0.0
    occlusion: int = 0
    truncation: float = 0.0

    def __post_init__(self):
        if self.points_inside < 0:
            raise ValueError("points_inside must be nonnegative")


@dataclass
class MatchResult:
    tp_flags: np.ndarray  # per detection, in input order
    matched_gt: np.ndarray  # gt index or -1
    gt_matched: np.ndarray  # per gt, bool


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float,
    iou_kind: str = "bev",
) -> MatchResult:
    """Greedy matching in descending confidence order.

    Each detection claims the highest-IoU unmatched ground truth of its
    class when that IoU reaches the threshold (true positive), otherwise
    it is a false positive; every ground truth matches at most once.
    IoU ties resolve to the lowest gt index.
    """
    iou_fn = iou_bev if iou_kind == "bev" else iou_3d
    n_d, n_g = len(dets), len(gts)
    tp = np.zeros(n_d, dtype=bool)
    matched = -np.ones(n_d, dtype=np.int64)
    taken = np.zeros(n_g, dtype=bool)
    order = sorted(range(n_d), key=lambda i: (-dets[i].confidence, i))
    for i in order:
        det = dets[i]
        best_g, best_iou = -1, 0.0
        for g in range(n_g):
            if taken[g] or gts[g].class_id != det.class_id:
                continue
            v = iou_fn(det.box, gts[g].box)
            if v > best_iou:
                best_g, best_iou = g, v
        if best_g >= 0 and best_iou >= iou_threshold:
            tp[i] = True
            matched[i] = best_g
            taken[best_g] = True
    return MatchResult(tp, matched, taken)


@dataclass
class PRCurve:
    """Score-sorted detection events with cumulative precision/recall.

    Each event is (score, tp_weight or None-for-fp); ``tp_weight`` lets
    heading-weighted variants discount a true positive's contribution to
    both precision and recall numerators.
    """

    scores: np.ndarray
    tp_weights: np.ndarray  # weight for tps, 0 for fps
    is_tp: np.ndarray
    n_gt: int
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)

    def __post_init__(self):
        order = np.argsort(-self.scores, kind="stable")
        self.scores = self.scores[order]
        self.tp_weights = self.tp_weights[order]
        self.is_tp = self.is_tp[order]
        cum_tp = np.cumsum(self.tp_weights)
        cum_all = np.arange(1, len(self.scores) + 1, dtype=np.float64)
        self.precision = cum_tp / cum_all if len(self.scores) else np.zeros(0)
        self.recall = cum_tp / self.n_gt if self.n_gt > 0 else np.zeros(len(self.scores))


def build_pr_curve(
    scores: Sequence[float],
    tp_flags: Sequence[bool],
    n_gt: int,
    tp_weights: Optional[Sequence[float]] = None,
) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(tp_flags, dtype=bool)
    if tp_weights is None:
        w = is_tp.astype(np.float64)
    else:
        w = np.where(is_tp, np.asarray(tp_weights, dtype=np.float64), 0.0)
    return PRCurve(scores, w, is_tp, int(n_gt))


def average_precision(curve: PRCurve, mode: str = "R40") -> float:
    """Interpolated AP: mean of max-precision-at-recall>=r over the samples.

    R11 samples r in {0, 0.1, ..., 1.0}; R40 samples {1/40, ..., 40/40}.
    """
    if curve.n_gt <= 0:
        raise UndefinedApError("average precision undefined without ground truth")
    if mode == "R11":
        samples = np.linspace(0.0, 1.0, 11)
    elif mode == "R40":
        samples = np.arange(1, 41) / 40.0
    else:
        raise ValueError(f"unknown AP mode {mode!r}")
    if len(curve.scores) == 0:
        return 0.0
    total = 0.0
    for r in samples:
        mask = curve.recall >= r - 1e-12
        total += float(curve.precision[mask].max()) if np.any(mask) else 0.0
    return total / len(samples)


def heading_weight(det_theta: float, gt_theta: float) -> float:
    """1 - |wrapped yaw error| / pi, clipped to [0, 1]."""
    err = abs(wrap_angle(det_theta - gt_theta))
    return float(np.clip(1.0 - err / math.pi, 0.0, 1.0))


def filter_level(gts: Sequence[GroundTruthBox], level: int) -> List[int]:
    """Difficulty by point count: level 1 keeps boxes with more than 5
    points, level 2 those with more than 1."""
    if level == 1:
        return [i for i, g in enumerate(gts) if g.points_inside > 5]
    if level == 2:
        return [i for i, g in enumerate(gts) if g.points_inside > 1]
    raise ValueError(f"unknown level {level}")


def _events_with_subset(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    active: Sequence[int],
    iou_threshold: float,
    iou_kind: str,
    weighted: bool,
) -> Tuple[List[float], List[bool], List[float]]:
    """Match against all gts; detections matched to inactive gts are dropped
    (the benchmark 'ignore' convention), unmatched ones count as fps."""
    active_set = set(active)
    res = match_detections(dets, gts, iou_threshold, iou_kind)
    scores: List[float] = []
    flags: List[bool] = []
    weights: List[float] = []
    for i, det in enumerate(dets):
        g = int(res.matched_gt[i])
        if res.tp_flags[i] and g not in active_set:
            continue
        scores.append(det.confidence)
        flags.append(bool(res.tp_flags[i]))
        if res.tp_flags[i] and weighted:
            weights.append(heading_weight(det.box.theta, gts[g].box.theta))
        else:
            weights.append(1.0)
    return scores, flags, weights


def map_with_heading(
    dets_per_scene: Sequence[Sequence[Detection]],
    gts_per_scene: Sequence[Sequence[GroundTruthBox]],
    iou_threshold: float,
    level: int,
    iou_kind: str = "3d",
    mode: str = "R40",
) -> Tuple[float, float]:
    """Point-count-level mAP and heading-weighted mAPH over all classes.

    Events from all scenes merge into one curve per class; the returned
    values average over classes that have ground truth at this level.
    """
    class_ids = sorted(
        {g.class_id for gts in gts_per_scene for i, g in enumerate(gts) if i in set(filter_level(gts, level))}
    )
    if not class_ids:
        raise UndefinedApError(f"no ground truth at level {level}")
    aps, aphs = [], []
    for cid in class_ids:
        scores: List[float] = []
        flags: List[bool] = []
        weights: List[float] = []
        n_gt = 0
        for dets, gts in zip(dets_per_scene, gts_per_scene):
            active = [i for i in filter_level(gts, level) if gts[i].class_id == cid]
            n_gt += len(active)
            class_dets = [d for d in dets if d.class_id == cid]
            s, f, w = _events_with_subset(class_dets, gts, active, iou_threshold, iou_kind, True)
            scores.extend(s)
            flags.extend(f)
            weights.extend(w)
        if n_gt == 0:
            continue
        plain = build_pr_curve(scores, flags, n_gt)
        weighted = build_pr_curve(scores, flags, n_gt, tp_weights=weights)
        aps.append(average_precision(plain, mode))
        aphs.append(average_precision(weighted, mode))
    return float(np.mean(aps)), float(np.mean(aphs))


KITTI_DIFFICULTY_TABLE = {
    "easy": {"min_height_px": 40.0, "max_occlusion": 0, "max_truncation": 0.15},
    "moderate": {"min_height_px": 25.0, "max_occlusion": 1, "max_truncation": 0.30},
    "hard": {"min_height_px": 25.0, "max_occlusion": 2, "max_truncation": 0.50},
}


def kitti_difficulty(gt: GroundTruthBox) -> str:
    """Bucket by projected height, occlusion state, and truncation.

    Returns 'easy', 'moderate', 'hard', or 'ignored' when even the hard
    thresholds fail.
    """
    for name in ("easy", "moderate", "hard"):
        t = KITTI_DIFFICULTY_TABLE[name]
        if (
            gt.height_px >= t["min_height_px"]
            and gt.occlusion <= t["max_occlusion"]
            and gt.truncation <= t["max_truncation"]
        ):
            return name
    return "ignored"


def difficulty_ap(
    dets_per_scene: Sequence[Sequence[Detection]],
    gts_per_scene: Sequence[Sequence[GroundTruthBox]],
    class_id: int,
    difficulty: str,
    iou_threshold: float,
    iou_kind: str = "bev",
    mode: str = "R40",
) -> float:
    """Class AP over a cumulative difficulty bucket ('all' disables the filter).

    Buckets are cumulative in the benchmark convention: 'moderate'
    evaluates easy+moderate boxes, 'hard' everything not ignored.
    """
    order = ("easy", "moderate", "hard")
    if difficulty not in order + ("all",):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    scores: List[float] = []
    flags: List[bool] = []
    n_gt = 0
    for dets, gts in zip(dets_per_scene, gts_per_scene):
        if difficulty == "all":
            active = [i for i, g in enumerate(gts) if g.class_id == class_id]
        else:
            rank = order.index(difficulty)
            active = [
                i
                for i, g in enumerate(gts)
                if g.class_id == class_id
                and kitti_difficulty(g) != "ignored"
                and order.index(kitti_difficulty(g)) <= rank
            ]
        n_gt += len(active)
        class_dets = [d for d in dets if d.class_id == class_id]
        s, f, _ = _events_with_subset(class_dets, gts, active, iou_threshold, iou_kind, False)
        scores.extend(s)
        flags.extend(f)
    if n_gt == 0:
        raise UndefinedApError(f"no ground truth for class {class_id} at {difficulty}")
    return average_precision(build_pr_curve(scores, flags, n_gt), mode)

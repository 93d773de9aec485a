"""Detection heads: BEV anchors, RPN, proposal decoding + NMS, RoI-grid
pooling over transformer keypoint features, and R-CNN refinement with
IoU-guided confidence."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .geometry import Box7, BoxDelta, decode_box, encode_box, iou_3d, iou_bev, nms
from .numerics import (
    DimensionError,
    NumericAbort,
    Tensor,
    add,
    constant,
    matmul,
    relu,
    reshape,
    sigmoid,
)
from .backbone import BevMap
from .pointcloud import NeighborIndex, SharedMlp

ANCHOR_YAWS = (0.0, 0.5 * math.pi)

# decoded proposals clamp dimension residuals so an untrained head cannot
# overflow the exp in box decoding
_DELTA_DIM_CLAMP = 8.0


@dataclass(frozen=True)
class ClassSpec:
    """Per-class anchor template: average dimensions and center height."""

    name: str
    length: float
    height: float
    width: float
    z_center: float


@dataclass
class AnchorSet:
    """One anchor per (BEV pixel, class, yaw), raster-aligned.

    Flat index = ((i * ny + j) * n_classes + c) * 2 + yaw_index.
    """

    boxes: List[Box7]
    class_ids: np.ndarray
    nx: int
    ny: int
    n_classes: int

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def per_pixel(self) -> int:
        return self.n_classes * len(ANCHOR_YAWS)


def generate_anchors(bev: BevMap, classes: Sequence[ClassSpec]) -> AnchorSet:
    """Tile class-template anchors at every BEV pixel center, two yaws each."""
    boxes: List[Box7] = []
    class_ids: List[int] = []
    for i in range(bev.nx):
        for j in range(bev.ny):
            x = bev.origin_xy[0] + (i + 0.5) * bev.cell_xy[0]
            y = bev.origin_xy[1] + (j + 0.5) * bev.cell_xy[1]
            for c, spec in enumerate(classes):
                for yaw in ANCHOR_YAWS:
                    boxes.append(Box7(x, y, spec.z_center, spec.length, spec.height, spec.width, yaw))
                    class_ids.append(c)
    return AnchorSet(boxes, np.array(class_ids, dtype=np.int64), bev.nx, bev.ny, len(classes))


@dataclass
class TargetAssignment:
    labels: np.ndarray  # +1 positive, 0 ignore, -1 negative
    matched_gt: np.ndarray  # gt index for positives, -1 otherwise
    deltas: np.ndarray  # (n_anchors, 7); zero rows for non-positives

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels == 1))


def assign_targets(
    anchors: AnchorSet,
    gt_boxes: Sequence[Box7],
    gt_class_ids: Sequence[int],
    pos_iou: float,
    neg_iou: float,
) -> TargetAssignment:
    """Label anchors by BEV IoU against same-class ground truth.

    An anchor is positive iff its best IoU reaches ``pos_iou`` or it is
    the argmax anchor for some ground-truth box (ties to the lowest
    anchor index); negative iff its best IoU is below ``neg_iou``;
    in-between anchors are ignored.  Positives carry the encoding of
    their matched box.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg {neg_iou} <= pos {pos_iou} <= 1")
    n_a = len(anchors)
    n_g = len(gt_boxes)
    labels = -np.ones(n_a, dtype=np.int64)
    matched = -np.ones(n_a, dtype=np.int64)
    deltas = np.zeros((n_a, 7))
    if n_g == 0:
        return TargetAssignment(labels, matched, deltas)

    gt_class_ids = np.asarray(gt_class_ids, dtype=np.int64)
    iou = np.zeros((n_a, n_g))
    for a in range(n_a):
        for g in range(n_g):
            if anchors.class_ids[a] == gt_class_ids[g]:
                iou[a, g] = iou_bev(anchors.boxes[a], gt_boxes[g])

    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n_a), best_gt]
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou < neg_iou) & (labels != 1)] = -1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = 0

    # every gt claims its argmax anchor (class-matched), tie to lowest index
    for g in range(n_g):
        col = iou[:, g]
        same_class = anchors.class_ids == gt_class_ids[g]
        if not np.any(same_class):
            continue
        masked = np.where(same_class, col, -1.0)
        a_star = int(np.argmax(masked))
        if masked[a_star] < 0.0:
            continue
        labels[a_star] = 1
        best_gt[a_star] = g

    pos = np.nonzero(labels == 1)[0]
    for a in pos:
        g = int(best_gt[a])
        matched[a] = g
        deltas[a] = encode_box(gt_boxes[g], anchors.boxes[a]).as_array()
    return TargetAssignment(labels, matched, deltas)


@dataclass
class RpnParams:
    weight: Tensor  # (c_bev, per_pixel * (n_classes + 7))
    bias: Tensor


@dataclass
class RpnOutput:
    """Per-anchor class logits and box residuals, raster-aligned."""

    class_logits: Tensor  # (n_anchors, n_classes)
    deltas: Tensor  # (n_anchors, 7)


def rpn_forward(bev: BevMap, params: RpnParams, anchors: AnchorSet) -> RpnOutput:
    """1x1 convolution heads over the BEV map."""
    per_pixel = anchors.per_pixel
    width = anchors.n_classes + 7
    if params.weight.shape[1] != per_pixel * width:
        raise DimensionError(
            f"RPN head width {params.weight.shape[1]} != {per_pixel} anchors x {width}"
        )
    raw = add(matmul(bev.tensor, params.weight), params.bias)
    per_anchor = reshape(raw, (len(anchors), width))
    from .numerics import slice_cols

    return RpnOutput(
        class_logits=slice_cols(per_anchor, 0, anchors.n_classes),
        deltas=slice_cols(per_anchor, anchors.n_classes, width),
    )


@dataclass(frozen=True)
class Proposal:
    box: Box7
    objectness: float
    class_id: int
    anchor_index: int

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError("objectness outside [0, 1]")


def decode_proposals(
    rpn_out: RpnOutput,
    anchors: AnchorSet,
    top_k: int,
    nms_threshold: float,
) -> List[Proposal]:
    """Sigmoid scores, residual decoding, BEV NMS, top-k selection."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    logits = rpn_out.class_logits.data
    if not np.all(np.isfinite(logits)):
        raise NumericAbort("non-finite class logits from the proposal head")
    probs = 1.0 / (1.0 + np.exp(-logits))
    scores = probs.max(axis=1)
    class_ids = probs.argmax(axis=1)
    deltas = rpn_out.deltas.data.copy()
    deltas[:, 3:6] = np.clip(deltas[:, 3:6], -_DELTA_DIM_CLAMP, _DELTA_DIM_CLAMP)

    boxes: List[Box7] = []
    for a in range(len(anchors)):
        boxes.append(decode_box(BoxDelta.from_array(deltas[a]), anchors.boxes[a]))
    kept = nms(
        [(b, float(s)) for b, s in zip(boxes, scores)], nms_threshold, "bev", max_keep=top_k
    )
    return [
        Proposal(boxes[a], float(scores[a]), int(class_ids[a]), a)
        for a in kept
    ]


def roi_grid_points(box: Box7, grid_n: int) -> np.ndarray:
    """Uniform grid_n^3 points in the box's local (rotated) frame."""
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    frac = (np.arange(grid_n) + 0.5) / grid_n - 0.5
    gx, gy, gz = np.meshgrid(frac * box.l, frac * box.w, frac * box.h, indexing="ij")
    local = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)
    c, s = math.cos(box.theta), math.sin(box.theta)
    world = local.copy()
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.x
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.y
    world[:, 2] = local[:, 2] + box.z
    return world


def build_roi_plan(
    proposals: Sequence[Proposal],
    keypoints_xyz: np.ndarray,
    index: NeighborIndex,
    grid_n: int,
    max_neighbors: int,
    radius: float,
):
    """Grid-point placement and keypoint grouping for a fixed proposal set."""
    from .backbone import build_group_plan

    all_points = []
    rotations = []
    for p in proposals:
        pts = roi_grid_points(p.box, grid_n)
        all_points.append(pts)
        c, s = math.cos(p.box.theta), math.sin(p.box.theta)
        rot = np.array([[c, s], [-s, c]])  # world -> box frame
        rotations.append(np.broadcast_to(rot, (len(pts), 2, 2)))
    query = np.vstack(all_points)
    rots = np.vstack(rotations)
    return build_group_plan(query, keypoints_xyz, index, radius, max_neighbors, rotations=rots)


def roi_grid_pool(
    proposals: Sequence[Proposal],
    keypoints_xyz: np.ndarray,
    keypoint_feats: Tensor,
    index: Optional[NeighborIndex],
    grid_n: int,
    max_neighbors: int,
    radius: float,
    mlp: SharedMlp,
    plan=None,
) -> Tensor:
    """Pool keypoint features at each proposal's grid points.

    Relative offsets are expressed in the proposal's local frame, so a
    rigid yaw of the whole scene about the proposal center leaves the
    pooled inputs unchanged.  Returns one row of grid_n^3 * c_out
    channels per proposal.
    """
    from .backbone import _grouped_set_abstraction

    if not proposals:
        return constant(np.zeros((0, grid_n**3 * mlp.out_dim)))
    if plan is None:
        plan = build_roi_plan(proposals, keypoints_xyz, index, grid_n, max_neighbors, radius)
    pooled = _grouped_set_abstraction(
        None, keypoints_xyz, keypoint_feats, None, radius, max_neighbors, mlp, plan=plan
    )
    return reshape(pooled, (len(proposals), grid_n**3 * mlp.out_dim))


@dataclass
class RcnnParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    conf_w: Tensor  # (hidden, 1)
    conf_b: Tensor
    reg_w: Tensor  # (hidden, 7)
    reg_b: Tensor


@dataclass
class RcnnOutput:
    confidence: Tensor  # (n_proposals, 1), sigmoid
    deltas: Tensor  # (n_proposals, 7)


def rcnn_refine(grid_features: Tensor, params: RcnnParams) -> RcnnOutput:
    """Two shared FC layers, then confidence and refinement heads."""
    if grid_features.shape[1] != params.fc1_w.shape[0]:
        raise DimensionError(
            f"grid feature width {grid_features.shape[1]} != head input {params.fc1_w.shape[0]}"
        )
    h = relu(add(matmul(grid_features, params.fc1_w), params.fc1_b))
    h = relu(add(matmul(h, params.fc2_w), params.fc2_b))
    conf = sigmoid(add(matmul(h, params.conf_w), params.conf_b))
    deltas = add(matmul(h, params.reg_w), params.reg_b)
    return RcnnOutput(conf, deltas)


def refine_box(proposal: Box7, delta: np.ndarray) -> Box7:
    """Apply a refinement residual with the proposal as its own anchor."""
    d = np.asarray(delta, dtype=np.float64).reshape(7).copy()
    d[3:6] = np.clip(d[3:6], -_DELTA_DIM_CLAMP, _DELTA_DIM_CLAMP)
    return decode_box(BoxDelta.from_array(d), proposal)


def iou_confidence_target(
    proposal: Box7,
    gt_boxes: Sequence[Box7],
    theta_lo: float = 0.25,
    theta_hi: float = 0.75,
) -> float:
    """Soft confidence target: clipped, rescaled best 3-D IoU with any gt."""
    if theta_hi <= theta_lo:
        raise ValueError("need theta_lo < theta_hi")
    if not gt_boxes:
        return 0.0
    best = max(iou_3d(proposal, g) for g in gt_boxes)
    return float(np.clip((best - theta_lo) / (theta_hi - theta_lo), 0.0, 1.0))


@dataclass(frozen=True)
class Detection:
    """A refined, scored box: the unit of evaluation."""

    box: Box7
    confidence: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")


def format_detection_line(det: Detection, class_names: Sequence[str]) -> str:
    b = det.box
    return (
        f"{class_names[det.class_id]} {b.x:.6f} {b.y:.6f} {b.z:.6f} "
        f"{b.l:.6f} {b.h:.6f} {b.w:.6f} {b.theta:.6f} {det.confidence:.6f}"
    )


def parse_detection_line(line: str, class_names: Sequence[str]) -> Detection:
    parts = line.split()
    if len(parts) != 9:
        raise ValueError(f"detection line needs 9 fields, got {len(parts)}")
    cid = list(class_names).index(parts[0])
    x, y, z, l, h, w, theta, conf = (float(v) for v in parts[1:])
    return Detection(Box7(x, y, z, l, h, w, theta), conf, cid)

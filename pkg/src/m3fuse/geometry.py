"""7-DoF box algebra: residual encoding, rotated IoU, non-maximum suppression.

Boxes are upright (yaw about z only).  The BEV footprint is an l-by-w
rectangle whose length axis points along the yaw angle; z is the center
of the h-tall vertical extent.  All functions here are pure and safe for
arbitrary parallel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidBoxError(ValueError):
    pass


class DecodeError(ValueError):
    pass


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    t = math.fmod(theta + math.pi, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    return t - math.pi


@dataclass(frozen=True)
class Box7:
    """Center (x, y, z), dimensions (l, h, w), BEV yaw theta (radians)."""

    x: float
    y: float
    z: float
    l: float
    h: float
    w: float
    theta: float

    def __post_init__(self):
        if not (self.l > 0.0 and self.h > 0.0 and self.w > 0.0):
            raise InvalidBoxError(f"nonpositive dimensions (l={self.l}, h={self.h}, w={self.w})")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.l, self.h, self.w, self.theta)):
            raise InvalidBoxError("non-finite box field")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def bev_corners(self) -> np.ndarray:
        """The 4 footprint corners in the x-y plane, counterclockwise."""
        return np.array(self._corner_list())

    def _corner_list(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        return [
            (c * hl - s * hw + self.x, s * hl + c * hw + self.y),
            (-c * hl - s * hw + self.x, -s * hl + c * hw + self.y),
            (-c * hl + s * hw + self.x, -s * hl - c * hw + self.y),
            (c * hl + s * hw + self.x, s * hl - c * hw + self.y),
        ]

    def bev_area(self) -> float:
        return self.l * self.w

    def volume(self) -> float:
        return self.l * self.w * self.h

    def z_range(self) -> Tuple[float, float]:
        return (self.z - 0.5 * self.h, self.z + 0.5 * self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.h, self.w, self.theta])


@dataclass(frozen=True)
class BoxDelta:
    """Dimensionless regression residuals between a box and an anchor."""

    dx: float
    dy: float
    dz: float
    dl: float
    dh: float
    dw: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dl, self.dh, self.dw, self.dtheta])

    @staticmethod
    def from_array(a) -> "BoxDelta":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return BoxDelta(*(float(v) for v in a))


def encode_box(gt: Box7, anchor: Box7) -> BoxDelta:
    """Residualize a target box against an anchor.

    Center offsets are normalized by the anchor's BEV diagonal (x, y) and
    height (z); dimensions are log ratios; the yaw residual is a plain
    difference wrapped to [-pi, pi) to keep the regression loss free of
    the 2*pi discontinuity.
    """
    if not (gt.l > 0.0 and gt.h > 0.0 and gt.w > 0.0):
        raise InvalidBoxError("nonpositive target dimensions")
    diag = math.sqrt(anchor.w * anchor.w + anchor.l * anchor.l)
    return BoxDelta(
        dx=(gt.x - anchor.x) / diag,
        dy=(gt.y - anchor.y) / diag,
        dz=(gt.z - anchor.z) / anchor.h,
        dl=math.log(gt.l / anchor.l),
        dh=math.log(gt.h / anchor.h),
        dw=math.log(gt.w / anchor.w),
        dtheta=wrap_angle(gt.theta - anchor.theta),
    )


def decode_box(delta: BoxDelta, anchor: Box7) -> Box7:
    """Invert encode_box; round-trips any valid box (yaw modulo 2*pi)."""
    diag = math.sqrt(anchor.w * anchor.w + anchor.l * anchor.l)
    try:
        l = anchor.l * math.exp(delta.dl)
        h = anchor.h * math.exp(delta.dh)
        w = anchor.w * math.exp(delta.dw)
    except OverflowError as e:
        raise DecodeError("decoded dimension overflows") from e
    if not (math.isfinite(l) and math.isfinite(h) and math.isfinite(w)):
        raise DecodeError("decoded dimension is non-finite")
    return Box7(
        x=anchor.x + delta.dx * diag,
        y=anchor.y + delta.dy * diag,
        z=anchor.z + delta.dz * anchor.h,
        l=l,
        h=h,
        w=w,
        theta=wrap_angle(anchor.theta + delta.dtheta),
    )


def _clip_polygon(poly, a, b):
    """Sutherland-Hodgman clip of a polygon by the half-plane left of a->b.

    Vertices are (x, y) tuples; polygons here never exceed 8 vertices, so
    scalar arithmetic beats array ops by a wide margin.
    """
    if not poly:
        return poly
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay
    out = []
    px, py = poly[-1]
    prev_side = ex * (py - ay) - ey * (px - ax)
    for cur in poly:
        cx, cy = cur
        cur_side = ex * (cy - ay) - ey * (cx - ax)
        if cur_side >= 0.0:
            if prev_side < 0.0:
                t = prev_side / (prev_side - cur_side)
                out.append((px + t * (cx - px), py + t * (cy - py)))
            out.append(cur)
        elif prev_side >= 0.0:
            t = prev_side / (prev_side - cur_side)
            out.append((px + t * (cx - px), py + t * (cy - py)))
        px, py, prev_side = cx, cy, cur_side
    return out


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    px, py = poly[-1]
    for cx, cy in poly:
        acc += px * cy - cx * py
        px, py = cx, cy
    return 0.5 * abs(acc)


def _box_order_key(b: Box7) -> tuple:
    return (b.x, b.y, b.z, b.l, b.h, b.w, b.theta)


def footprint_area(box: Box7) -> float:
    """Shoelace area of the rotated footprint; shares every primitive with
    the clipper so identical boxes give bitwise-identical areas."""
    return _polygon_area(box._corner_list())


def _footprints_disjoint(a: Box7, b: Box7) -> bool:
    # quick reject: footprints cannot touch when the center distance
    # exceeds the sum of the half-diagonals
    dx = a.x - b.x
    dy = a.y - b.y
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    return dx * dx + dy * dy > reach * reach


def bev_intersection_area(a: Box7, b: Box7) -> float:
    """Exact overlap area of two rotated footprints (clip + shoelace).

    Arguments run in a canonical order so the result is exactly
    symmetric in (a, b).
    """
    if _footprints_disjoint(a, b):
        return 0.0
    if _box_order_key(b) < _box_order_key(a):
        a, b = b, a
    poly = a._corner_list()
    clip = b._corner_list()
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def iou_bev(a: Box7, b: Box7) -> float:
    """Rotated intersection-over-union of the BEV footprints, in [0, 1].

    Exactly symmetric, and exactly 1 for identical boxes.
    """
    if _footprints_disjoint(a, b):
        return 0.0
    inter = bev_intersection_area(a, b)
    union = footprint_area(a) + footprint_area(b) - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box7, b: Box7) -> float:
    """Volume IoU of two upright boxes (BEV overlap times z overlap)."""
    az0, az1 = a.z_range()
    bz0, bz1 = b.z_range()
    zo = min(az1, bz1) - max(az0, bz0)
    if zo <= 0.0 or _footprints_disjoint(a, b):
        return 0.0
    inter = bev_intersection_area(a, b) * zo
    union = footprint_area(a) * (az1 - az0) + footprint_area(b) * (bz1 - bz0) - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(
    boxes: Sequence[Tuple[Box7, float]],
    iou_threshold: float,
    iou_kind: str = "bev",
    max_keep: Optional[int] = None,
) -> List[int]:
    """Greedy descending-score suppression; returns kept input indices.

    A box is suppressed iff its IoU with an already-kept box exceeds the
    threshold.  Score ties break toward the lower input index.  Stopping
    at ``max_keep`` kept boxes yields exactly the first ``max_keep``
    entries of the unbounded result (greedy keeps are score-ordered).
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou threshold {iou_threshold} outside [0, 1]")
    if iou_kind not in ("bev", "3d"):
        raise ValueError(f"unknown iou kind {iou_kind!r}")
    iou_fn = iou_bev if iou_kind == "bev" else iou_3d
    for _, score in boxes:
        if not math.isfinite(score):
            raise ValueError("non-finite score in NMS input")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i][1], i))
    kept: List[int] = []
    for i in order:
        box = boxes[i][0]
        if all(iou_fn(box, boxes[j][0]) <= iou_threshold for j in kept):
            kept.append(i)
            if max_keep is not None and len(kept) >= max_keep:
                break
    return kept

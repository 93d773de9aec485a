"""Synthetic scenes and the on-disk scene format.

Point clouds are little-endian f32 (x, y, z, r) quadruples; labels are
text lines ``class x y z l h w theta points_inside height_px occlusion
truncation``.  Generation is a pure function of the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from ..geometry import Box7, iou_bev
from ..metrics import GroundTruthBox
from ..pointcloud import PointCloud
from .config import PipelineConfig


class GenerationError(RuntimeError):
    pass


@dataclass
class Scene:
    scene_id: str
    cloud: PointCloud
    gts: List[GroundTruthBox]


def _sample_box_points(rng: np.random.Generator, box: Box7, count: int) -> np.ndarray:
    """Points on the box surface and interior, in world coordinates."""
    local = rng.uniform(-0.5, 0.5, size=(count, 3)) * np.array([box.l, box.w, box.h])
    # push ~70% of the points onto a random face for a shell-like look
    on_face = rng.uniform(size=count) < 0.7
    face_axis = rng.integers(0, 3, size=count)
    face_sign = np.where(rng.uniform(size=count) < 0.5, -0.5, 0.5)
    half = np.array([box.l, box.w, box.h])
    for i in np.nonzero(on_face)[0]:
        local[i, face_axis[i]] = face_sign[i] * half[face_axis[i]]
    c, s = math.cos(box.theta), math.sin(box.theta)
    world = np.empty((count, 4))
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.x
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.y
    world[:, 2] = local[:, 2] + box.z
    world[:, 3] = rng.uniform(0.0, 1.0, size=count)
    return world


def generate_synthetic_scene(
    cfg: PipelineConfig,
    seed: int,
    n_objects: int | None = None,
    scene_id: str | None = None,
) -> Scene:
    """Place non-overlapping boxes in range and fill them with points.

    Each box gets points proportional to its volume (at least 8, or 2-5
    when the sparse fraction selects it); clutter is uniform over the
    range.  Placement retries are bounded; exhausting them raises a
    GenerationError.
    """
    rng = np.random.default_rng(seed)
    extent = cfg.axis_range()
    specs = cfg.class_specs()
    if n_objects is None:
        n_objects = int(rng.integers(cfg.gen_n_objects_min, cfg.gen_n_objects_max + 1))
    if n_objects < 0:
        raise ValueError("n_objects must be nonnegative")

    boxes: List[Box7] = []
    class_ids: List[int] = []
    max_retries = 200
    for _ in range(n_objects):
        placed = False
        for _ in range(max_retries):
            cid = int(rng.integers(0, len(specs)))
            spec = specs[cid]
            jit = 1.0 + cfg.gen_dim_jitter * rng.uniform(-1.0, 1.0, size=3)
            l, h, w = spec.length * jit[0], spec.height * jit[1], spec.width * jit[2]
            margin = 0.5 * math.hypot(l, w)
            if extent.x_max - extent.x_min <= 2 * margin or extent.y_max - extent.y_min <= 2 * margin:
                raise GenerationError("range too small for the class footprint")
            x = rng.uniform(extent.x_min + margin, extent.x_max - margin)
            y = rng.uniform(extent.y_min + margin, extent.y_max - margin)
            z = spec.z_center + rng.uniform(-0.1, 0.1)
            theta = rng.uniform(-math.pi, math.pi)
            cand = Box7(x, y, z, l, h, w, theta)
            if all(iou_bev(cand, b) <= 0.05 for b in boxes):
                boxes.append(cand)
                class_ids.append(cid)
                placed = True
                break
        if not placed:
            raise GenerationError(f"could not place object {len(boxes)} after {max_retries} retries")

    pts_parts: List[np.ndarray] = []
    gts: List[GroundTruthBox] = []
    for box, cid in zip(boxes, class_ids):
        if cfg.gen_sparse_fraction > 0.0 and rng.uniform() < cfg.gen_sparse_fraction:
            count = int(rng.integers(2, 6))
        else:
            count = max(8, int(round(18.0 * box.volume())))
        pts_parts.append(_sample_box_points(rng, box, count))
        dist = math.hypot(box.x, box.y)
        height_px = 1200.0 * box.h / max(dist, 1.0)
        gts.append(
            GroundTruthBox(
                box=box,
                class_id=cid,
                points_inside=count,
                height_px=height_px,
                occlusion=0,
                truncation=0.0,
            )
        )

    n_clutter = cfg.gen_clutter_points
    clutter = np.empty((n_clutter, 4))
    clutter[:, 0] = rng.uniform(extent.x_min, extent.x_max, size=n_clutter)
    clutter[:, 1] = rng.uniform(extent.y_min, extent.y_max, size=n_clutter)
    clutter[:, 2] = rng.uniform(extent.z_min, extent.z_max, size=n_clutter)
    clutter[:, 3] = rng.uniform(0.0, 1.0, size=n_clutter)
    pts_parts.append(clutter)

    cloud = PointCloud(np.vstack(pts_parts) if pts_parts else np.zeros((0, 4)))
    return Scene(scene_id or f"scene_{seed:04d}", cloud, gts)


# ---------------------------------------------------------------------------
# file formats


def save_cloud(path, cloud: PointCloud) -> None:
    cloud.points.astype("<f4").tofile(str(path))


def load_cloud(path) -> PointCloud:
    raw = np.fromfile(str(path), dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"point file {path} length not a multiple of 4 floats")
    return PointCloud(raw.reshape(-1, 4).astype(np.float64))


def format_label_line(gt: GroundTruthBox, class_names: Sequence[str]) -> str:
    b = gt.box
    return (
        f"{class_names[gt.class_id]} {b.x:.6f} {b.y:.6f} {b.z:.6f} "
        f"{b.l:.6f} {b.h:.6f} {b.w:.6f} {b.theta:.6f} "
        f"{gt.points_inside} {gt.height_px:.6f} {gt.occlusion} {gt.truncation:.6f}"
    )


def parse_label_line(line: str, class_names: Sequence[str]) -> GroundTruthBox:
    parts = line.split()
    if len(parts) != 12:
        raise ValueError(f"label line needs 12 fields, got {len(parts)}")
    cid = list(class_names).index(parts[0])
    x, y, z, l, h, w, theta = (float(v) for v in parts[1:8])
    return GroundTruthBox(
        box=Box7(x, y, z, l, h, w, theta),
        class_id=cid,
        points_inside=int(parts[8]),
        height_px=float(parts[9]),
        occlusion=int(parts[10]),
        truncation=float(parts[11]),
    )


def save_scene(dir_path, scene: Scene, class_names: Sequence[str]) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    save_cloud(d / f"{scene.scene_id}.bin", scene.cloud)
    lines = [format_label_line(g, class_names) for g in scene.gts]
    (d / f"{scene.scene_id}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def load_scene(dir_path, scene_id: str, class_names: Sequence[str]) -> Scene:
    d = Path(dir_path)
    cloud = load_cloud(d / f"{scene_id}.bin")
    gts = []
    label_path = d / f"{scene_id}.txt"
    if label_path.exists():
        for line in label_path.read_text().splitlines():
            if line.strip():
                gts.append(parse_label_line(line, class_names))
    return Scene(scene_id, cloud, gts)


def list_scene_ids(dir_path) -> List[str]:
    return sorted(p.stem for p in Path(dir_path).glob("*.bin"))


def load_scenes(dir_path, class_names: Sequence[str]) -> List[Scene]:
    return [load_scene(dir_path, sid, class_names) for sid in list_scene_ids(dir_path)]

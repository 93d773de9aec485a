"""Raw point-set primitives: voxelization, furthest-point sampling,
radius neighbor search, and the shared-MLP/max-pool set-abstraction block."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .numerics import EmptyInputError, Tensor, concat_cols, constant, segment_max


@dataclass(frozen=True)
class PointCloud:
    """Points as an (n, 4) array of (x, y, z, reflectance)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point array must be (n, 4), got {pts.shape}")
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True)
class AxisRange:
    """Axis-aligned metric bounds of the scene."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise ValueError("degenerate range")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])


class VoxelGrid:
    """Sparse voxel occupancy with per-cell feature rows.

    ``keys`` is a (k, 3) int array of (i, j, k) cell coordinates sorted
    lexicographically; ``feats`` is the aligned (k, C) feature matrix
    (numpy right after voxelization, a graph Tensor inside the backbone);
    ``counts`` is the number of source points per cell (1 for derived
    grids).  Only non-empty cells are stored.
    """

    def __init__(self, origin, voxel_size, extents, keys, feats, counts=None):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
        if np.any(self.voxel_size <= 0.0):
            raise ValueError("voxel size components must be positive")
        self.extents = tuple(int(e) for e in extents)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if keys.size:
            if keys.min() < 0 or np.any(keys >= np.array(self.extents)):
                raise ValueError("voxel key outside extents")
        self.keys = keys
        self.feats = feats
        self.counts = (
            np.asarray(counts, dtype=np.int64)
            if counts is not None
            else np.ones(len(keys), dtype=np.int64)
        )
        self._index: Optional[Dict[Tuple[int, int, int], int]] = None

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def feature_dim(self) -> int:
        return int(self.feats.shape[1])

    def feats_array(self) -> np.ndarray:
        return self.feats.data if isinstance(self.feats, Tensor) else self.feats

    def key_index(self) -> Dict[Tuple[int, int, int], int]:
        if self._index is None:
            self._index = {tuple(k): i for i, k in enumerate(self.keys.tolist())}
        return self._index

    def linear_keys(self) -> np.ndarray:
        """Keys collapsed to sorted scalar ids (row-major over extents)."""
        _, w, h = self.extents[0], self.extents[1], self.extents[2]
        return (self.keys[:, 0] * w + self.keys[:, 1]) * h + self.keys[:, 2]

    def cell_centers(self) -> np.ndarray:
        return self.origin + (self.keys + 0.5) * self.voxel_size


def grid_extents(rng: AxisRange, voxel_size) -> Tuple[int, int, int]:
    size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    span = rng.hi - rng.lo
    return tuple(int(math.ceil(s / v - 1e-9)) for s, v in zip(span, size))


def voxelize(pc: PointCloud, rng: AxisRange, voxel_size) -> VoxelGrid:
    """Bucket points into voxels; each non-empty cell averages its points.

    Points outside the range are dropped.  Cell features are the mean of
    the member points' (x, y, z, r) rows; empty cells are simply absent.
    """
    size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    if np.any(size <= 0.0):
        raise ValueError("voxel size components must be positive")
    extents = grid_extents(rng, size)
    pts = pc.points
    if len(pts) == 0:
        return VoxelGrid(rng.lo, size, extents, np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    idx = np.floor((pts[:, :3] - rng.lo) / size).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.array(extents)), axis=1)
    ok &= np.all(pts[:, :3] >= rng.lo, axis=1) & np.all(pts[:, :3] < rng.hi, axis=1)
    idx, pts = idx[ok], pts[ok]
    if len(pts) == 0:
        return VoxelGrid(rng.lo, size, extents, np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    lin = (idx[:, 0] * extents[1] + idx[:, 1]) * extents[2] + idx[:, 2]
    order = np.argsort(lin, kind="stable")
    lin, idx, pts = lin[order], idx[order], pts[order]
    uniq, starts, counts = np.unique(lin, return_index=True, return_counts=True)
    keys = idx[starts]
    feats = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    return VoxelGrid(rng.lo, size, extents, keys, feats, counts)


def furthest_point_sampling(pc: PointCloud, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset selection over point positions.

    The first pick is ``seed_index``; every later pick maximizes the
    distance to the already-picked set, ties resolving to the lowest
    index.  If n >= |pc| the result is an FPS-ordered permutation of all
    indices.
    """
    m = len(pc)
    if m == 0:
        raise EmptyInputError("furthest_point_sampling on empty cloud")
    if n < 1:
        raise ValueError("sample count must be >= 1")
    if not 0 <= seed_index < m:
        raise IndexError(f"seed index {seed_index} outside [0, {m})")
    n = min(n, m)
    xyz = pc.xyz
    picks = np.empty(n, dtype=np.int64)
    picks[0] = seed_index
    d2 = np.sum((xyz - xyz[seed_index]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))  # first occurrence on ties = lowest index
        picks[i] = nxt
        d2 = np.minimum(d2, np.sum((xyz - xyz[nxt]) ** 2, axis=1))
    return picks


class NeighborIndex:
    """Uniform-grid spatial hash for Euclidean radius queries."""

    def __init__(self, points: np.ndarray, cell_size: float):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if cell_size <= 0.0:
            raise ValueError("cell size must be positive")
        self.points = points
        self.cell_size = float(cell_size)
        self.cells: Dict[Tuple[int, int, int], List[int]] = {}
        if len(points):
            coords = np.floor(points / self.cell_size).astype(np.int64)
            for i, c in enumerate(map(tuple, coords.tolist())):
                self.cells.setdefault(c, []).append(i)

    def query(self, center, r: float, max_count: Optional[int] = None) -> np.ndarray:
        """Indices of points with distance <= r, ascending by (distance, index).

        When more than ``max_count`` qualify, only the nearest are kept
        (distance ties resolve to the lower index).
        """
        if r <= 0.0:
            raise ValueError("radius must be positive")
        if not self.cells:
            return np.zeros(0, dtype=np.int64)
        center = np.asarray(center, dtype=np.float64).reshape(3)
        lo = np.floor((center - r) / self.cell_size).astype(np.int64)
        hi = np.floor((center + r) / self.cell_size).astype(np.int64)
        candidates: List[int] = []
        for ci in range(lo[0], hi[0] + 1):
            for cj in range(lo[1], hi[1] + 1):
                for ck in range(lo[2], hi[2] + 1):
                    bucket = self.cells.get((ci, cj, ck))
                    if bucket:
                        candidates.extend(bucket)
        if not candidates:
            return np.zeros(0, dtype=np.int64)
        cand = np.array(sorted(candidates), dtype=np.int64)
        d2 = np.sum((self.points[cand] - center) ** 2, axis=1)
        ok = d2 <= r * r
        cand, d2 = cand[ok], d2[ok]
        order = np.lexsort((cand, d2))  # distance first, index breaks ties
        cand = cand[order]
        if max_count is not None and len(cand) > max_count:
            cand = cand[:max_count]
        return cand


class SharedMlp:
    """Two-layer perceptron applied independently to each input row."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @property
    def in_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.w2.shape[1])

    def __call__(self, x: Tensor) -> Tensor:
        from .numerics import add, matmul, relu

        h = relu(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


def set_abstraction(
    center,
    neighbor_xyz: np.ndarray,
    neighbor_feats: Tensor,
    mlp,
    relative: bool = True,
) -> Tensor:
    """PointNet-style pooling of a neighborhood into one feature row.

    Each neighbor feature (optionally concatenated with its offset from
    the center) runs through the shared MLP; channels are then max-pooled
    over the neighborhood.  An empty neighborhood yields a zero row of
    the MLP's output width.  Max-pooling makes the result exactly
    invariant to neighbor ordering.
    """
    k = neighbor_feats.shape[0] if neighbor_feats.data.ndim == 2 else 0
    if k == 0:
        return constant(np.zeros((1, mlp.out_dim)))
    x = neighbor_feats
    if relative:
        center = np.asarray(center, dtype=np.float64).reshape(3)
        offsets = constant(np.asarray(neighbor_xyz, dtype=np.float64).reshape(-1, 3) - center)
        x = concat_cols([x, offsets])
    if x.shape[1] != mlp.in_dim:
        raise ValueError(f"MLP input width {mlp.in_dim} does not match features {x.shape[1]}")
    mapped = mlp(x)
    return segment_max(mapped, np.array([0, k], dtype=np.int64))

"""Representation encoders: multi-scale sparse voxel CNN, BEV 2-D
encoder-decoder, and keypoint feature extraction (set abstraction over
voxels and raw points, bilinear BEV sampling).

Sparse convolution uses regular (dilating) semantics: an output cell
exists wherever at least one kernel tap lands on a non-empty input cell.
All convolutions are assembled from gather/matmul/scatter tape ops so
gradients flow end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    constant,
    gather_rows,
    layer_norm,
    matmul,
    mul_rows,
    relu,
    reshape,
    scatter_rows,
    segment_max,
)
from .pointcloud import NeighborIndex, PointCloud, SharedMlp, VoxelGrid

# kernel tap order: lexicographic (dx, dy, dz) over {-1, 0, 1}^3
OFFSETS_3D = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])
OFFSETS_2D = np.array([(da, db) for da in (-1, 0, 1) for db in (-1, 0, 1)])

# conv feature rows are only a few channels wide and can land nearly
# constant (single-tap cells), where a small layer-norm epsilon makes the
# normalization *and its derivatives* blow up; this floor keeps the conv
# blocks smooth without visibly changing well-conditioned rows
CONV_LN_EPS = 1e-2


@dataclass
class SparseConvLayer:
    """One 3x3x3 sparse conv block: conv + per-cell layer norm + ReLU."""

    kernel: Tensor  # (27 * c_in, c_out), tap-major
    bias: Tensor  # (c_out,)
    ln_gain: Tensor
    ln_bias: Tensor
    stride: int

    @property
    def c_in(self) -> int:
        return self.kernel.shape[0] // 27

    @property
    def c_out(self) -> int:
        return self.kernel.shape[1]


def _linearize(keys: np.ndarray, extents) -> np.ndarray:
    return (keys[:, 0] * extents[1] + keys[:, 1]) * extents[2] + keys[:, 2]


def _conv_output_keys(in_keys: np.ndarray, extents_in, stride: int) -> Tuple[np.ndarray, tuple]:
    extents_out = tuple(int(math.ceil(e / stride)) for e in extents_in)
    if len(in_keys) == 0:
        return np.zeros((0, 3), dtype=np.int64), extents_out
    cands = []
    for off in OFFSETS_3D:
        c = in_keys - off
        if stride > 1:
            ok = np.all(c % stride == 0, axis=1)
            c = c[ok] // stride
        ok = np.all((c >= 0) & (c < np.array(extents_out)), axis=1)
        cands.append(c[ok])
    allc = np.vstack(cands)
    if len(allc) == 0:
        return np.zeros((0, 3), dtype=np.int64), extents_out
    lin = _linearize(allc, extents_out)
    uniq = np.unique(lin)
    keys = np.stack(
        [uniq // (extents_out[1] * extents_out[2]), (uniq // extents_out[2]) % extents_out[1], uniq % extents_out[2]],
        axis=1,
    )
    return keys.astype(np.int64), extents_out


@dataclass
class SparseConvPlan:
    """Occupancy-dependent structure of one sparse conv application."""

    out_keys: np.ndarray
    extents_out: tuple
    taps: List[Tuple[int, np.ndarray, np.ndarray]]  # (tap index, in rows, out rows)


def build_conv_plan(keys: np.ndarray, extents, stride: int) -> SparseConvPlan:
    out_keys, extents_out = _conv_output_keys(keys, extents, stride)
    taps: List[Tuple[int, np.ndarray, np.ndarray]] = []
    if len(out_keys):
        in_lin = _linearize(keys, extents)  # ascending: keys are lex-sorted
        ext = np.array(extents)
        for o_idx, off in enumerate(OFFSETS_3D):
            src = out_keys * stride + off
            valid = np.all((src >= 0) & (src < ext), axis=1)
            rows_out = np.nonzero(valid)[0]
            if len(rows_out) == 0:
                continue
            src_lin = _linearize(src[valid], extents)
            pos = np.searchsorted(in_lin, src_lin)
            pos_c = np.minimum(pos, len(in_lin) - 1)
            hit = in_lin[pos_c] == src_lin
            if not np.any(hit):
                continue
            taps.append((o_idx, pos_c[hit], rows_out[hit]))
    return SparseConvPlan(out_keys, extents_out, taps)


def sparse_conv_block(
    grid: VoxelGrid, layer: SparseConvLayer, plan: Optional[SparseConvPlan] = None
) -> VoxelGrid:
    """Apply one strided sparse conv block; output voxel size scales by the stride."""
    if grid.feature_dim != layer.c_in:
        raise DimensionError(f"layer expects {layer.c_in} channels, grid has {grid.feature_dim}")
    feats = grid.feats if isinstance(grid.feats, Tensor) else constant(grid.feats)
    stride = layer.stride
    if plan is None:
        plan = build_conv_plan(grid.keys, grid.extents, stride)
    out_keys, extents_out = plan.out_keys, plan.extents_out
    out_size = grid.voxel_size * stride
    m_out = len(out_keys)
    if m_out == 0:
        empty = constant(np.zeros((0, layer.c_out)))
        return VoxelGrid(grid.origin, out_size, extents_out, out_keys, empty)

    c_in = layer.c_in
    prods: List[Tensor] = []
    out_rows_all: List[np.ndarray] = []
    for o_idx, in_rows, rows_out in plan.taps:
        tap = gather_rows(layer.kernel, np.arange(o_idx * c_in, (o_idx + 1) * c_in))
        prods.append(matmul(gather_rows(feats, in_rows), tap))
        out_rows_all.append(rows_out)

    if prods:
        stacked = prods[0] if len(prods) == 1 else concat_rows(prods)
        summed = scatter_rows(stacked, np.concatenate(out_rows_all), m_out)
    else:  # pragma: no cover - occupied inputs always hit some tap
        summed = constant(np.zeros((m_out, layer.c_out)))
    pre = add(summed, layer.bias)
    normed = layer_norm(pre, layer.ln_gain, layer.ln_bias, CONV_LN_EPS)
    return VoxelGrid(grid.origin, out_size, extents_out, out_keys, relu(normed))


@dataclass
class MultiScaleVoxelFeatures:
    """The four voxel grids at downsample factors 1x, 2x, 4x, 8x."""

    grids: List[VoxelGrid]

    def __post_init__(self):
        if len(self.grids) != 4:
            raise ValueError("expected exactly four scales")

    @property
    def scale_factors(self) -> Tuple[int, ...]:
        return (1, 2, 4, 8)


def run_voxel_cnn(
    grid: VoxelGrid,
    layers: Sequence[SparseConvLayer],
    plans: Optional[Sequence[SparseConvPlan]] = None,
) -> MultiScaleVoxelFeatures:
    """Four consecutive blocks with strides (1, 2, 2, 2); every scale is kept."""
    if len(layers) != 4:
        raise DimensionError("voxel CNN needs four blocks")
    expected = (1, 2, 2, 2)
    for layer, s in zip(layers, expected):
        if layer.stride != s:
            raise DimensionError(f"block strides must be {expected}")
    scales = []
    cur = grid
    for i, layer in enumerate(layers):
        cur = sparse_conv_block(cur, layer, plans[i] if plans is not None else None)
        scales.append(cur)
    return MultiScaleVoxelFeatures(scales)


def build_cnn_plans(grid: VoxelGrid) -> List[SparseConvPlan]:
    """Precompute the occupancy structure of all four blocks for one scene."""
    plans: List[SparseConvPlan] = []
    keys, extents = grid.keys, grid.extents
    for stride in (1, 2, 2, 2):
        plan = build_conv_plan(keys, extents, stride)
        plans.append(plan)
        keys, extents = plan.out_keys, plan.extents_out
    return plans


@dataclass
class BevMap:
    """Dense top-down feature map stored as (nx * ny, channels) rows."""

    tensor: Tensor
    nx: int
    ny: int
    origin_xy: np.ndarray  # metric position of pixel (0, 0) corner
    cell_xy: np.ndarray  # metric pixel size

    @property
    def channels(self) -> int:
        return int(self.tensor.shape[1])

    def pixel_row(self, i: int, j: int) -> int:
        return i * self.ny + j


def bev_flatten(grid8x: VoxelGrid) -> BevMap:
    """Collapse the z axis of the 8x grid into channels (index k*C + c)."""
    nx, ny, nz = grid8x.extents
    c = grid8x.feature_dim
    feats = grid8x.feats if isinstance(grid8x.feats, Tensor) else constant(grid8x.feats)
    n_pix = nx * ny
    slices: List[Tensor] = []
    for k in range(nz):
        rows = np.nonzero(grid8x.keys[:, 2] == k)[0]
        pix = grid8x.keys[rows, 0] * ny + grid8x.keys[rows, 1]
        slices.append(scatter_rows(gather_rows(feats, rows), pix, n_pix))
    dense = slices[0] if len(slices) == 1 else concat_cols(slices)
    return BevMap(dense, nx, ny, grid8x.origin[:2].copy(), grid8x.voxel_size[:2].copy())


@lru_cache(maxsize=64)
def _conv2d_gather_index(nx: int, ny: int, stride: int) -> Tuple[np.ndarray, int, int]:
    nx_out = int(math.ceil(nx / stride))
    ny_out = int(math.ceil(ny / stride))
    io, jo = np.meshgrid(np.arange(nx_out), np.arange(ny_out), indexing="ij")
    idx = np.empty((nx_out * ny_out, 9), dtype=np.int64)
    pad_row = nx * ny  # index of the appended zero row
    for t, (da, db) in enumerate(OFFSETS_2D):
        si = io * stride + da
        sj = jo * stride + db
        ok = (si >= 0) & (si < nx) & (sj >= 0) & (sj < ny)
        lin = np.where(ok, si * ny + sj, pad_row)
        idx[:, t] = lin.reshape(-1)
    return idx.reshape(-1), nx_out, ny_out


@lru_cache(maxsize=64)
def _deconv2d_taps(nx_in: int, ny_in: int, nx_out: int, ny_out: int, stride: int):
    ii, jj = np.meshgrid(np.arange(nx_in), np.arange(ny_in), indexing="ij")
    ii, jj = ii.reshape(-1), jj.reshape(-1)
    taps = []
    for t, (da, db) in enumerate(OFFSETS_2D):
        ti = ii * stride + da
        tj = jj * stride + db
        ok = (ti >= 0) & (ti < nx_out) & (tj >= 0) & (tj < ny_out)
        rows = np.nonzero(ok)[0]
        if len(rows):
            taps.append((t, rows, ti[ok] * ny_out + tj[ok]))
    return taps


def conv2d(
    x: Tensor, nx: int, ny: int, kernel: Tensor, bias: Tensor, stride: int
) -> Tuple[Tensor, int, int]:
    """3x3 zero-padded 2-D convolution over a row-major (nx*ny, c) map."""
    c_in = kernel.shape[0] // 9
    if x.shape[1] != c_in or x.shape[0] != nx * ny:
        raise DimensionError(f"conv2d input {x.shape} vs kernel {kernel.shape} on {nx}x{ny}")
    idx, nx_out, ny_out = _conv2d_gather_index(nx, ny, stride)
    padded = concat_rows([x, constant(np.zeros((1, c_in)))])
    patches = reshape(gather_rows(padded, idx), (nx_out * ny_out, 9 * c_in))
    return add(matmul(patches, kernel), bias), nx_out, ny_out


def deconv2d(
    x: Tensor,
    nx_in: int,
    ny_in: int,
    kernel: Tensor,
    bias: Tensor,
    nx_out: int,
    ny_out: int,
    stride: int = 2,
) -> Tensor:
    """3x3 transposed convolution upsampling to an exact target size."""
    c_in = kernel.shape[0] // 9
    if x.shape[1] != c_in or x.shape[0] != nx_in * ny_in:
        raise DimensionError(f"deconv2d input {x.shape} vs kernel {kernel.shape}")
    prods: List[Tensor] = []
    targets: List[np.ndarray] = []
    for t, rows, tgt in _deconv2d_taps(nx_in, ny_in, nx_out, ny_out, stride):
        tap = gather_rows(kernel, np.arange(t * c_in, (t + 1) * c_in))
        prods.append(matmul(gather_rows(x, rows), tap))
        targets.append(tgt)
    stacked = prods[0] if len(prods) == 1 else concat_rows(prods)
    out = scatter_rows(stacked, np.concatenate(targets), nx_out * ny_out)
    return add(out, bias)


@dataclass
class BevBlockParams:
    down_kernel: Tensor
    down_bias: Tensor
    down_ln_gain: Tensor
    down_ln_bias: Tensor
    up_kernel: Tensor
    up_bias: Tensor
    up_ln_gain: Tensor
    up_ln_bias: Tensor


def bev_conv_net(bev: BevMap, blocks: Sequence[BevBlockParams]) -> BevMap:
    """Two (downsample -> upsample) blocks preserving the spatial size.

    Normalization is a per-position layer norm over channels; at batch
    size 1-4 batch statistics would be meaningless, and the choice makes
    gradient accumulation exactly equivalent to true batching.
    """
    if bev.nx < 4 or bev.ny < 4:
        raise DimensionError(f"BEV map {bev.nx}x{bev.ny} too small for two stride-2 blocks")
    x, nx, ny = bev.tensor, bev.nx, bev.ny
    for p in blocks:
        down, nx_d, ny_d = conv2d(x, nx, ny, p.down_kernel, p.down_bias, stride=2)
        down = relu(layer_norm(down, p.down_ln_gain, p.down_ln_bias, CONV_LN_EPS))
        up = deconv2d(down, nx_d, ny_d, p.up_kernel, p.up_bias, nx, ny, stride=2)
        x = relu(layer_norm(up, p.up_ln_gain, p.up_ln_bias, CONV_LN_EPS))
    return BevMap(x, nx, ny, bev.origin_xy, bev.cell_xy)


# ---------------------------------------------------------------------------
# keypoint feature extraction


@dataclass
class KeypointSet:
    """Sampled keypoints with their six per-representation feature matrices."""

    positions: np.ndarray  # (n, 3)
    f_voxel: List[Tensor]  # four (n, c_i) matrices, scales 1x..8x
    f_point: Tensor  # (n, c_point)
    f_bev: Tensor  # (n, c_bev)

    def ordered_features(self) -> List[Tensor]:
        return [*self.f_voxel, self.f_point, self.f_bev]

    def feature_widths(self) -> List[int]:
        return [int(f.shape[1]) for f in self.ordered_features()]


@dataclass
class GroupPlan:
    """Flattened radius-neighborhood structure for a batch of queries."""

    flat_rows: np.ndarray  # source row per (query, neighbor) pair
    bounds: np.ndarray  # segment bounds, len n_queries + 1
    offsets: np.ndarray  # (total, 3) source - query, possibly rotated
    n_queries: int


def build_group_plan(
    query_xyz: np.ndarray,
    source_xyz: np.ndarray,
    index: NeighborIndex,
    radius: float,
    max_neighbors: int,
    rotations: Optional[np.ndarray] = None,
) -> GroupPlan:
    """Radius-group queries against an index; ``rotations`` (one 2x2 BEV
    rotation per query) expresses offsets in a query-local frame."""
    n = len(query_xyz)
    neighbor_rows: List[np.ndarray] = []
    lengths = np.zeros(n, dtype=np.int64)
    for i in range(n):
        nb = index.query(query_xyz[i], radius, max_neighbors)
        neighbor_rows.append(nb)
        lengths[i] = len(nb)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    total = int(bounds[-1])
    if total == 0:
        return GroupPlan(np.zeros(0, dtype=np.int64), bounds, np.zeros((0, 3)), n)
    flat = np.concatenate([r for r in neighbor_rows if len(r)])
    offsets = source_xyz[flat] - np.repeat(query_xyz, lengths, axis=0)
    if rotations is not None:
        rep_rot = np.repeat(rotations, lengths, axis=0)  # (total, 2, 2)
        offsets[:, :2] = np.einsum("nab,nb->na", rep_rot, offsets[:, :2])
    return GroupPlan(flat, bounds, offsets, n)


def _grouped_set_abstraction(
    query_xyz: np.ndarray,
    source_xyz: np.ndarray,
    source_feats: Tensor,
    index: Optional[NeighborIndex],
    radius: float,
    max_neighbors: int,
    mlp: SharedMlp,
    rotations: Optional[np.ndarray] = None,
    plan: Optional[GroupPlan] = None,
) -> Tensor:
    """Batched radius-group + shared MLP + per-group channel max.

    Groups with no neighbors yield exact zero rows.
    """
    if plan is None:
        plan = build_group_plan(query_xyz, source_xyz, index, radius, max_neighbors, rotations)
    if len(plan.flat_rows) == 0:
        return constant(np.zeros((plan.n_queries, mlp.out_dim)))
    gathered = gather_rows(source_feats, plan.flat_rows)
    x = concat_cols([gathered, constant(plan.offsets)])
    if x.shape[1] != mlp.in_dim:
        raise DimensionError(f"MLP width {mlp.in_dim} vs grouped features {x.shape[1]}")
    return segment_max(mlp(x), plan.bounds)


def default_vsa_radii(base_voxel_size, scale_factors=(1, 2, 4, 8)) -> List[float]:
    """Per-scale grouping radius: twice the voxel diagonal of that scale."""
    size = np.asarray(base_voxel_size, dtype=np.float64).reshape(3)
    return [2.0 * float(np.linalg.norm(size * f)) for f in scale_factors]


def voxel_set_abstraction(
    keypoints_xyz: np.ndarray,
    ms: MultiScaleVoxelFeatures,
    radii: Sequence[float],
    mlps: Sequence[SharedMlp],
    max_neighbors: int,
    plans: Optional[Sequence[GroupPlan]] = None,
) -> List[Tensor]:
    """Pool each scale's non-empty voxel features onto the keypoints."""
    if len(radii) != 4 or len(mlps) != 4:
        raise DimensionError("need one radius and one MLP per scale")
    out: List[Tensor] = []
    for i, (grid, radius, mlp) in enumerate(zip(ms.grids, radii, mlps)):
        centers = grid.cell_centers()
        feats = grid.feats if isinstance(grid.feats, Tensor) else constant(grid.feats)
        if plans is not None:
            plan = plans[i]
            index = None
        else:
            plan = None
            index = NeighborIndex(centers, radius)
        out.append(
            _grouped_set_abstraction(
                keypoints_xyz, centers, feats, index, radius, max_neighbors, mlp, plan=plan
            )
        )
    return out


def build_vsa_plans(
    keypoints_xyz: np.ndarray,
    ms: MultiScaleVoxelFeatures,
    radii: Sequence[float],
    max_neighbors: int,
) -> List[GroupPlan]:
    plans = []
    for grid, radius in zip(ms.grids, radii):
        centers = grid.cell_centers()
        index = NeighborIndex(centers, radius)
        plans.append(build_group_plan(keypoints_xyz, centers, index, radius, max_neighbors))
    return plans


def point_set_abstraction(
    keypoints_xyz: np.ndarray,
    pc: PointCloud,
    radius: float,
    mlp: SharedMlp,
    max_neighbors: int,
    plan: Optional[GroupPlan] = None,
) -> Tensor:
    """Pool raw (x, y, z, r) point features onto the keypoints."""
    index = None if plan is not None else NeighborIndex(pc.xyz, radius)
    return _grouped_set_abstraction(
        keypoints_xyz, pc.xyz, constant(pc.points), index, radius, max_neighbors, mlp, plan=plan
    )


def bev_bilinear_sample(bev: BevMap, keypoints_xyz: np.ndarray) -> Tensor:
    """Sample the BEV map at keypoint positions with bilinear blending.

    Out-of-range keypoints clamp to the border pixel.
    """
    kp = np.asarray(keypoints_xyz, dtype=np.float64).reshape(-1, 3)
    u = (kp[:, 0] - bev.origin_xy[0]) / bev.cell_xy[0] - 0.5
    v = (kp[:, 1] - bev.origin_xy[1]) / bev.cell_xy[1] - 0.5
    u = np.clip(u, 0.0, bev.nx - 1.0)
    v = np.clip(v, 0.0, bev.ny - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(bev.nx - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), max(bev.ny - 2, 0))
    fu = u - i0
    fv = v - j0
    i1 = np.minimum(i0 + 1, bev.nx - 1)
    j1 = np.minimum(j0 + 1, bev.ny - 1)

    corners = [
        (i0 * bev.ny + j0, (1.0 - fu) * (1.0 - fv)),
        (i0 * bev.ny + j1, (1.0 - fu) * fv),
        (i1 * bev.ny + j0, fu * (1.0 - fv)),
        (i1 * bev.ny + j1, fu * fv),
    ]
    out = None
    for idx, w in corners:
        term = mul_rows(gather_rows(bev.tensor, idx), w)
        out = term if out is None else add(out, term)
    return out

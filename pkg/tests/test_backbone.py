import numpy as np
import pytest

from m3fuse.backbone import (
    CONV_LN_EPS,
    BevBlockParams,
    BevMap,
    SparseConvLayer,
    bev_bilinear_sample,
    bev_conv_net,
    bev_flatten,
    build_cnn_plans,
    default_vsa_radii,
    point_set_abstraction,
    run_voxel_cnn,
    sparse_conv_block,
    voxel_set_abstraction,
)
from m3fuse.numerics import DimensionError, Tensor
from m3fuse.pointcloud import AxisRange, PointCloud, SharedMlp, voxelize


def make_layer(rng, c_in, c_out, stride):
    return SparseConvLayer(
        kernel=Tensor(rng.normal(scale=0.4, size=(27 * c_in, c_out))),
        bias=Tensor(rng.normal(scale=0.1, size=c_out)),
        ln_gain=Tensor(np.ones(c_out)),
        ln_bias=Tensor(np.zeros(c_out)),
        stride=stride,
    )


def dense_reference_conv(dense_in, kernel, bias, stride):
    """Plain 6-loop 3-D convolution with zero padding, then the same
    per-cell normalization and ReLU the sparse block applies."""
    ex, ey, ez, c_in = dense_in.shape
    c_out = kernel.shape[1]
    ox, oy, oz = -(-ex // stride), -(-ey // stride), -(-ez // stride)
    out = np.zeros((ox, oy, oz, c_out))
    taps = kernel.reshape(27, c_in, c_out)
    for i in range(ox):
        for j in range(oy):
            for k in range(oz):
                acc = bias.copy()
                t = 0
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dz in (-1, 0, 1):
                            si, sj, sk = i * stride + dx, j * stride + dy, k * stride + dz
                            if 0 <= si < ex and 0 <= sj < ey and 0 <= sk < ez:
                                acc = acc + dense_in[si, sj, sk] @ taps[t]
                            t += 1
                out[i, j, k] = acc
    mu = out.mean(axis=3, keepdims=True)
    var = ((out - mu) ** 2).mean(axis=3, keepdims=True)
    return np.maximum((out - mu) / np.sqrt(var + CONV_LN_EPS), 0.0)


class TestSparseConvBlock:
    def test_single_voxel_dilates_to_neighborhood(self):
        rng = np.random.default_rng(0)
        pc = PointCloud(np.array([[2.5, 2.5, 2.5, 0.3]]))
        grid = voxelize(pc, AxisRange(0, 5, 0, 5, 0, 5), (1, 1, 1))
        out = sparse_conv_block(grid, make_layer(rng, 4, 3, stride=1))
        assert len(out) == 27
        assert set(map(tuple, out.keys.tolist())) == {
            (i, j, k) for i in (1, 2, 3) for j in (1, 2, 3) for k in (1, 2, 3)
        }

    def test_boundary_clipping(self):
        rng = np.random.default_rng(1)
        pc = PointCloud(np.array([[0.5, 0.5, 0.5, 0.3]]))
        grid = voxelize(pc, AxisRange(0, 5, 0, 5, 0, 5), (1, 1, 1))
        out = sparse_conv_block(grid, make_layer(rng, 4, 3, stride=1))
        assert len(out) == 8  # corner cell: 2x2x2 reachable neighborhood

    def test_zero_kernel_gives_normalized_bias(self):
        rng = np.random.default_rng(2)
        layer = make_layer(rng, 4, 3, stride=1)
        layer.kernel = Tensor(np.zeros((27 * 4, 3)))
        pc = PointCloud(np.array([[2.5, 2.5, 2.5, 0.3]]))
        grid = voxelize(pc, AxisRange(0, 5, 0, 5, 0, 5), (1, 1, 1))
        out = sparse_conv_block(grid, layer)
        b = layer.bias.data
        mu, var = b.mean(), ((b - b.mean()) ** 2).mean()
        expect = np.maximum((b - mu) / np.sqrt(var + CONV_LN_EPS), 0.0)
        np.testing.assert_allclose(out.feats_array(), np.broadcast_to(expect, (27, 3)), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_dense_reference_on_full_grid(self, stride):
        rng = np.random.default_rng(3)
        # a fully dense 5x5x5 toy grid: sparse semantics must equal dense conv
        pts = []
        for i in range(5):
            for j in range(5):
                for k in range(5):
                    pts.append([i + 0.5, j + 0.5, k + 0.5, rng.uniform()])
        grid = voxelize(PointCloud(np.array(pts)), AxisRange(0, 5, 0, 5, 0, 5), (1, 1, 1))
        layer = make_layer(rng, 4, 3, stride=stride)
        out = sparse_conv_block(grid, layer)

        dense_in = np.zeros((5, 5, 5, 4))
        for row, key in enumerate(grid.keys):
            dense_in[tuple(key)] = grid.feats[row]
        want = dense_reference_conv(dense_in, layer.kernel.data, layer.bias.data, stride)
        got = np.zeros_like(want)
        for row, key in enumerate(out.keys):
            got[tuple(key)] = out.feats_array()[row]
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(4)
        pc = PointCloud(np.array([[1.5, 1.5, 1.5, 0.0]]))
        grid = voxelize(pc, AxisRange(0, 4, 0, 4, 0, 4), (1, 1, 1))
        with pytest.raises(DimensionError):
            sparse_conv_block(grid, make_layer(rng, 7, 3, stride=1))

    def test_plan_matches_direct_computation(self):
        from m3fuse.backbone import build_conv_plan

        rng = np.random.default_rng(5)
        pts = np.concatenate(
            [rng.uniform(0, 6, size=(80, 3)), rng.uniform(size=(80, 1))], axis=1
        )
        grid = voxelize(PointCloud(pts), AxisRange(0, 6, 0, 6, 0, 6), (1, 1, 1))
        layer = make_layer(rng, 4, 3, stride=2)
        plan = build_conv_plan(grid.keys, grid.extents, stride=2)
        direct = sparse_conv_block(grid, layer)
        planned = sparse_conv_block(grid, layer, plan)
        np.testing.assert_array_equal(direct.keys, planned.keys)
        np.testing.assert_array_equal(direct.feats_array(), planned.feats_array())


class TestRunVoxelCnn:
    def setup_method(self):
        rng = np.random.default_rng(6)
        pts = np.concatenate(
            [rng.uniform(0, 8, size=(300, 3)), rng.uniform(size=(300, 1))], axis=1
        )
        self.grid = voxelize(PointCloud(pts), AxisRange(0, 8, 0, 8, 0, 8), (0.5, 0.5, 0.5))
        channels = [16, 32, 64, 64]
        c_prev = 4
        self.layers = []
        for c, s in zip(channels, (1, 2, 2, 2)):
            self.layers.append(make_layer(rng, c_prev, c, s))
            c_prev = c

    def test_output_dims_match_reference_widths(self):
        ms = run_voxel_cnn(self.grid, self.layers)
        assert [g.feature_dim for g in ms.grids] == [16, 32, 64, 64]

    def test_extents_halve_with_ceiling(self):
        ms = run_voxel_cnn(self.grid, self.layers)
        assert ms.grids[0].extents == (16, 16, 16)
        assert ms.grids[1].extents == (8, 8, 8)
        assert ms.grids[2].extents == (4, 4, 4)
        assert ms.grids[3].extents == (2, 2, 2)

    def test_empty_grid_stays_empty(self):
        empty = voxelize(
            PointCloud(np.zeros((0, 4))), AxisRange(0, 8, 0, 8, 0, 8), (0.5, 0.5, 0.5)
        )
        ms = run_voxel_cnn(empty, self.layers)
        assert all(len(g) == 0 for g in ms.grids)

    def test_deep_cells_trace_back_to_occupied_ancestors(self):
        ms = run_voxel_cnn(self.grid, self.layers)
        base = {tuple(k) for k in self.grid.keys.tolist()}
        # each 8x cell must contain >= 1 occupied 1x cell inside its
        # receptive field (radius grows by 1 cell per conv, halving per stride)
        for key8 in ms.grids[3].keys.tolist():
            found = False
            # receptive field of an 8x cell in base coordinates
            lo = [8 * c - 15 for c in key8]
            hi = [8 * c + 22 for c in key8]
            for cell in base:
                if all(l <= v <= h for v, l, h in zip(cell, lo, hi)):
                    found = True
                    break
            assert found, f"8x cell {key8} has no occupied ancestor"


class TestBevFlatten:
    def make_grid(self, rng, nx=4, ny=4, nz=3, c=5, n_cells=10):
        keys = rng.choice(nx * ny * nz, size=n_cells, replace=False)
        keys = np.stack([keys // (ny * nz), (keys // nz) % ny, keys % nz], axis=1)
        keys = keys[np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))]
        feats = rng.normal(size=(n_cells, c))
        from m3fuse.pointcloud import VoxelGrid

        return VoxelGrid(np.zeros(3), np.ones(3), (nx, ny, nz), keys, feats)

    def test_single_voxel_lands_in_its_channel_block(self):
        from m3fuse.pointcloud import VoxelGrid

        feats = np.array([[1.0, 2.0]])
        grid = VoxelGrid(np.zeros(3), np.ones(3), (3, 3, 2), np.array([[1, 2, 1]]), feats)
        bev = bev_flatten(grid)
        assert bev.tensor.shape == (9, 4)
        row = bev.tensor.data[1 * 3 + 2]
        np.testing.assert_array_equal(row, [0.0, 0.0, 1.0, 2.0])  # z-block 1
        assert np.all(bev.tensor.data[np.arange(9) != 5] == 0.0)

    def test_empty_grid_gives_zero_map(self):
        from m3fuse.pointcloud import VoxelGrid

        grid = VoxelGrid(np.zeros(3), np.ones(3), (3, 3, 2), np.zeros((0, 3)), np.zeros((0, 2)))
        bev = bev_flatten(grid)
        assert np.all(bev.tensor.data == 0.0)

    def test_conservation(self):
        rng = np.random.default_rng(7)
        grid = self.make_grid(rng)
        bev = bev_flatten(grid)
        # every voxel feature value lands in exactly one map slot and
        # nothing else is written: the entry multisets match bitwise
        map_vals = np.sort(bev.tensor.data.ravel())
        src_vals = np.sort(
            np.concatenate([grid.feats.ravel(), np.zeros(bev.tensor.data.size - grid.feats.size)])
        )
        np.testing.assert_array_equal(map_vals, src_vals)


def make_bev_blocks(rng, c_in, hid, out):
    def ln(width):
        return Tensor(np.ones(width)), Tensor(np.zeros(width))

    blocks = []
    c = c_in
    for h, o in ((hid, hid), (hid, out)):
        g1, b1 = ln(h)
        g2, b2 = ln(o)
        blocks.append(
            BevBlockParams(
                down_kernel=Tensor(rng.normal(scale=0.3, size=(9 * c, h))),
                down_bias=Tensor(np.zeros(h)),
                down_ln_gain=g1,
                down_ln_bias=b1,
                up_kernel=Tensor(rng.normal(scale=0.3, size=(9 * h, o))),
                up_bias=Tensor(np.zeros(o)),
                up_ln_gain=g2,
                up_ln_bias=b2,
            )
        )
        c = o
    return blocks


class TestBevConvNet:
    @pytest.mark.parametrize("nx,ny", [(8, 8), (7, 9), (10, 5)])
    def test_spatial_dims_preserved(self, nx, ny):
        rng = np.random.default_rng(8)
        bev = BevMap(Tensor(rng.normal(size=(nx * ny, 6))), nx, ny, np.zeros(2), np.ones(2))
        out = bev_conv_net(bev, make_bev_blocks(rng, 6, 5, 4))
        assert (out.nx, out.ny) == (nx, ny)
        assert out.tensor.shape == (nx * ny, 4)

    def test_full_scale_reference_bev_plan(self):
        # 8x downsampling of the full-scale grid gives the published
        # 200 x 176 output raster
        from m3fuse.harness import kitti_reference_config
        from m3fuse.pointcloud import grid_extents

        cfg = kitti_reference_config()
        ex, ey, _ = grid_extents(cfg.axis_range(), cfg.voxel_size)
        assert (ex // 8, ey // 8) == (176, 200)

    def test_too_small_map_rejected(self):
        rng = np.random.default_rng(9)
        bev = BevMap(Tensor(rng.normal(size=(6, 4))), 2, 3, np.zeros(2), np.ones(2))
        with pytest.raises(DimensionError):
            bev_conv_net(bev, make_bev_blocks(rng, 4, 4, 4))


class TestVoxelSetAbstraction:
    def setup_method(self):
        rng = np.random.default_rng(10)
        pts = np.concatenate(
            [rng.uniform(0, 8, size=(200, 3)), rng.uniform(size=(200, 1))], axis=1
        )
        grid = voxelize(PointCloud(pts), AxisRange(0, 8, 0, 8, 0, 8), (0.5, 0.5, 0.5))
        channels = [6, 6, 6, 6]
        layers = []
        c_prev = 4
        for c, s in zip(channels, (1, 2, 2, 2)):
            layers.append(make_layer(rng, c_prev, c, s))
            c_prev = c
        self.ms = run_voxel_cnn(grid, layers)
        self.rng = rng
        self.mlps = [
            SharedMlp(
                Tensor(rng.normal(size=(6 + 3, 8))),
                Tensor(rng.normal(size=8)),
                Tensor(rng.normal(size=(8, 5))),
                Tensor(rng.normal(size=5)),
            )
            for _ in range(4)
        ]
        self.radii = default_vsa_radii((0.5, 0.5, 0.5))

    def test_default_radii_are_twice_scale_diagonals(self):
        d1 = 2.0 * np.linalg.norm([0.5, 0.5, 0.5])
        assert self.radii[0] == pytest.approx(d1)
        assert self.radii[3] == pytest.approx(8 * d1)

    def test_isolated_keypoint_gets_zero_rows(self):
        kp = np.array([[1000.0, 1000.0, 1000.0]])
        out = voxel_set_abstraction(kp, self.ms, self.radii, self.mlps, 8)
        for o in out:
            np.testing.assert_array_equal(o.data, np.zeros((1, 5)))

    def test_single_voxel_keypoint_at_center_is_mlp_of_zero_offset(self):
        from m3fuse.pointcloud import VoxelGrid
        from m3fuse.backbone import MultiScaleVoxelFeatures
        from m3fuse.numerics import concat_cols, constant

        rng = np.random.default_rng(21)
        feats = rng.normal(size=(1, 6))
        grids = []
        for f in (1, 2, 4, 8):
            size = np.array([0.5, 0.5, 0.5]) * f
            grids.append(
                VoxelGrid(np.zeros(3), size, (2, 2, 2), np.array([[1, 0, 1]]), feats.copy())
            )
        ms = MultiScaleVoxelFeatures(grids)
        center = grids[0].cell_centers()[0]
        out = voxel_set_abstraction(center[None, :], ms, self.radii, self.mlps, 8)
        direct = self.mlps[0](concat_cols([constant(feats), constant(np.zeros((1, 3)))]))
        np.testing.assert_array_equal(out[0].data, direct.data)

    def test_output_shapes(self):
        kp = self.rng.uniform(0, 8, size=(12, 3))
        out = voxel_set_abstraction(kp, self.ms, self.radii, self.mlps, 8)
        assert [o.shape for o in out] == [(12, 5)] * 4


class TestBevBilinearSample:
    def make_map(self, rng, nx=6, ny=5, c=4):
        return BevMap(
            Tensor(rng.normal(size=(nx * ny, c))), nx, ny, np.array([0.0, 0.0]), np.array([1.0, 1.0])
        )

    def test_pixel_center_hits_exactly(self):
        rng = np.random.default_rng(11)
        bev = self.make_map(rng)
        kp = np.array([[2.5, 3.5, 0.0]])  # center of pixel (2, 3)
        out = bev_bilinear_sample(bev, kp)
        np.testing.assert_array_equal(out.data[0], bev.tensor.data[2 * 5 + 3])

    def test_constant_map_constant_output(self):
        bev = BevMap(Tensor(np.full((30, 2), 3.25)), 6, 5, np.zeros(2), np.ones(2))
        rng = np.random.default_rng(12)
        kp = np.column_stack([rng.uniform(-2, 8, size=(20, 2)), np.zeros(20)])
        out = bev_bilinear_sample(bev, kp)
        np.testing.assert_allclose(out.data, 3.25, atol=1e-12)

    def test_linear_ramp_reproduced(self):
        nx, ny = 7, 6
        vals = np.zeros((nx * ny, 1))
        for i in range(nx):
            for j in range(ny):
                vals[i * ny + j, 0] = float(i)
        bev = BevMap(Tensor(vals), nx, ny, np.zeros(2), np.ones(2))
        rng = np.random.default_rng(13)
        u = rng.uniform(0.0, nx - 1.0, size=25)
        kp = np.column_stack([u + 0.5, np.full(25, 2.5), np.zeros(25)])
        out = bev_bilinear_sample(bev, kp)
        np.testing.assert_allclose(out.data[:, 0], u, atol=1e-12)

    def test_out_of_range_clamps_to_border(self):
        rng = np.random.default_rng(14)
        bev = self.make_map(rng)
        out = bev_bilinear_sample(bev, np.array([[-50.0, -50.0, 0.0]]))
        np.testing.assert_array_equal(out.data[0], bev.tensor.data[0])


class TestPointSetAbstraction:
    def test_matches_manual_grouping(self):
        rng = np.random.default_rng(15)
        pts = np.concatenate(
            [rng.uniform(0, 4, size=(50, 3)), rng.uniform(size=(50, 1))], axis=1
        )
        pc = PointCloud(pts)
        mlp = SharedMlp(
            Tensor(rng.normal(size=(7, 6))),
            Tensor(rng.normal(size=6)),
            Tensor(rng.normal(size=(6, 4))),
            Tensor(rng.normal(size=4)),
        )
        kp = pts[:3, :3]
        out = point_set_abstraction(kp, pc, 1.0, mlp, 16)
        assert out.shape == (3, 4)
        # keypoint 0 sits on a cloud point, so its group is non-empty
        assert np.any(out.data[0] != 0.0)

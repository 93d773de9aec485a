import math

import numpy as np
import pytest

from m3fuse.geometry import (
    Box7,
    BoxDelta,
    DecodeError,
    InvalidBoxError,
    decode_box,
    encode_box,
    iou_3d,
    iou_bev,
    nms,
    wrap_angle,
)
from m3fuse.harness.fuzz import mc_iou_3d, mc_iou_bev, random_box


class TestBox7:
    def test_nonpositive_dims_rejected(self):
        with pytest.raises(InvalidBoxError):
            Box7(0, 0, 0, -1.0, 1.0, 1.0, 0.0)

    def test_theta_wrapped_into_range(self):
        b = Box7(0, 0, 0, 1, 1, 1, 3.5)
        assert -math.pi <= b.theta < math.pi
        assert b.theta == pytest.approx(3.5 - 2 * math.pi)

    def test_corners_of_axis_aligned_box(self):
        b = Box7(1.0, 2.0, 0.0, 4.0, 1.0, 2.0, 0.0)
        corners = sorted(map(tuple, b.bev_corners()))
        assert corners == [(-1.0, 1.0), (-1.0, 3.0), (3.0, 1.0), (3.0, 3.0)]


class TestEncodeDecode:
    def test_identity_pair_gives_zero_delta(self):
        b = Box7(1.0, 2.0, -0.5, 3.0, 1.5, 1.6, 0.7)
        d = encode_box(b, b)
        np.testing.assert_allclose(d.as_array(), np.zeros(7), atol=1e-15)

    def test_hand_computed_center_offset(self):
        anchor = Box7(0, 0, 0, 3.0, 1.5, 1.6, 0.0)
        gt = Box7(1.0, 0, 0, 3.0, 1.5, 1.6, 0.0)
        d = encode_box(gt, anchor)
        assert d.dx == pytest.approx(1.0 / math.sqrt(11.56), abs=1e-12)
        assert (d.dy, d.dz, d.dl, d.dh, d.dw, d.dtheta) == (0, 0, 0, 0, 0, 0)

    def test_theta_residual_wraps(self):
        anchor = Box7(0, 0, 0, 1, 1, 1, 0.0)
        gt = Box7(0, 0, 0, 1, 1, 1, 3.5)
        d = encode_box(gt, anchor)
        assert d.dtheta == pytest.approx(3.5 - 2 * math.pi, abs=1e-12)

    def test_log_doubling(self):
        anchor = Box7(0, 0, 0, 2.0, 1.0, 1.0, 0.0)
        out = decode_box(BoxDelta(0, 0, 0, math.log(2.0), 0, 0, 0), anchor)
        assert out.l == pytest.approx(4.0, rel=1e-12)

    def test_zero_delta_returns_anchor(self):
        anchor = Box7(3, -2, 1, 4.0, 1.7, 2.1, -1.2)
        out = decode_box(BoxDelta(0, 0, 0, 0, 0, 0, 0), anchor)
        np.testing.assert_allclose(out.as_array(), anchor.as_array(), atol=1e-15)

    def test_roundtrip_many_random_pairs(self):
        rng = np.random.default_rng(0)
        worst_coord, worst_dim = 0.0, 0.0
        for _ in range(1000):
            gt, anchor = random_box(rng), random_box(rng)
            back = decode_box(encode_box(gt, anchor), anchor)
            worst_coord = max(
                worst_coord, abs(back.x - gt.x), abs(back.y - gt.y), abs(back.z - gt.z)
            )
            for got, want in ((back.l, gt.l), (back.h, gt.h), (back.w, gt.w)):
                worst_dim = max(worst_dim, abs(got - want) / want)
            dtheta = abs(back.theta - gt.theta) % (2 * math.pi)
            assert min(dtheta, 2 * math.pi - dtheta) < 1e-9
        assert worst_coord < 1e-9
        assert worst_dim < 1e-9

    def test_decode_overflow_raises(self):
        anchor = Box7(0, 0, 0, 1, 1, 1, 0)
        with pytest.raises(DecodeError):
            decode_box(BoxDelta(0, 0, 0, 1e4, 0, 0, 0), anchor)

    def test_nonpositive_gt_dimension_rejected(self):
        anchor = Box7(0, 0, 0, 1, 1, 1, 0)
        gt = Box7(0, 0, 0, 1, 1, 1, 0)
        object.__setattr__(gt, "l", -1.0)  # bypass constructor to hit the op check
        with pytest.raises(InvalidBoxError):
            encode_box(gt, anchor)


class TestIouBev:
    def test_self_iou_is_one(self):
        b = Box7(1, 2, 0, 3.0, 1.5, 1.6, 0.9)
        assert iou_bev(b, b) == 1.0

    def test_disjoint_is_zero(self):
        a = Box7(0, 0, 0, 2, 1, 2, 0.3)
        b = Box7(100.0, 0, 0, 2, 1, 2, 1.0)
        assert iou_bev(a, b) == 0.0

    def test_axis_aligned_half_overlap(self):
        a = Box7(0, 0, 0, 1, 1, 1, 0)
        b = Box7(0.5, 0, 0, 1, 1, 1, 0)
        assert iou_bev(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_rotated_pairs_match_monte_carlo(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            a, b = random_box(rng), random_box(rng)
            mc = mc_iou_bev(a, b, 200_000, rng)
            assert abs(iou_bev(a, b) - mc) < 3e-3

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            tx, ty, yaw = rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-np.pi, np.pi)
            c, s = math.cos(yaw), math.sin(yaw)

            def move(bx):
                x2 = c * bx.x - s * bx.y + tx
                y2 = s * bx.x + c * bx.y + ty
                return Box7(x2, y2, bx.z, bx.l, bx.h, bx.w, bx.theta + yaw)

            assert iou_bev(move(a), move(b)) == pytest.approx(iou_bev(a, b), abs=1e-9)

    def test_degenerate_far_apart_returns_zero_not_nan(self):
        a = Box7(0, 0, 0, 1e-9, 1e-9, 1e-9, 0.0)
        b = Box7(10, 10, 10, 1e-9, 1e-9, 1e-9, 0.0)
        assert iou_bev(a, b) == 0.0


class TestIou3d:
    def test_self_iou_is_one(self):
        b = Box7(0, 0, 0, 3, 1.5, 1.6, 0.4)
        assert iou_3d(b, b) == 1.0

    def test_z_shift_closed_form(self):
        a = Box7(0, 0, 1.0, 2, 2, 2, 0)  # z-range [0, 2]
        b = Box7(0, 0, 2.0, 2, 2, 2, 0)  # z-range [1, 3]
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_random_pairs_match_monte_carlo(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            a, b = random_box(rng), random_box(rng)
            mc = mc_iou_3d(a, b, 200_000, rng)
            assert abs(iou_3d(a, b) - mc) < 3e-3

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-12)


def brute_force_nms(boxes, threshold, kind):
    """Reference: recompute every pairwise IoU, no shortcuts."""
    iou = iou_bev if kind == "bev" else iou_3d
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i][1], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if iou(boxes[i][0], boxes[j][0]) > threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


class TestNms:
    def test_single_box_kept(self):
        assert nms([(Box7(0, 0, 0, 1, 1, 1, 0), 0.5)], 0.5) == [0]

    def test_duplicate_suppressed(self):
        b = Box7(0, 0, 0, 2, 1, 1, 0.2)
        kept = nms([(b, 0.9), (b, 0.8)], 0.7)
        assert kept == [0]

    def test_empty_input(self):
        assert nms([], 0.5) == []

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(6)
        for trial in range(30):
            boxes = [(random_box(rng, 3.0), float(rng.uniform())) for _ in range(50)]
            for kind in ("bev", "3d"):
                assert nms(boxes, 0.3, kind) == brute_force_nms(boxes, 0.3, kind)

    def test_kept_set_is_anti_chain(self):
        rng = np.random.default_rng(7)
        boxes = [(random_box(rng, 2.0), float(rng.uniform())) for _ in range(40)]
        kept = nms(boxes, 0.4, "bev")
        for i in kept:
            for j in kept:
                if i != j:
                    assert iou_bev(boxes[i][0], boxes[j][0]) <= 0.4

    def test_score_tie_breaks_to_lower_index(self):
        b1 = Box7(0, 0, 0, 2, 1, 1, 0)
        b2 = Box7(0.1, 0, 0, 2, 1, 1, 0)
        kept = nms([(b1, 0.5), (b2, 0.5)], 0.5)
        assert kept[0] == 0

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError):
            nms([(Box7(0, 0, 0, 1, 1, 1, 0), float("nan"))], 0.5)


class TestWrapAngle:
    def test_range(self):
        for t in np.linspace(-20, 20, 401):
            w = wrap_angle(float(t))
            assert -math.pi <= w < math.pi
            # same angle modulo 2*pi
            assert abs(math.fmod(w - t, 2 * math.pi)) % (2 * math.pi) == pytest.approx(
                0.0, abs=1e-9
            ) or abs(abs(math.fmod(w - t, 2 * math.pi)) - 2 * math.pi) < 1e-9

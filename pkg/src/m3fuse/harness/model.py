"""The full detector: parameter construction, forward pass, training
loss, and inference.

Weight initialization is uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for
every linear/conv weight; biases and all residual-branch output
projections start at zero, so a freshly built model's fusion stages act
as pure normalization (the baseline-collapse start state).

For gradient checking, the discrete structure of a step (proposal set
and anchor assignment) can be frozen so the loss is a smooth function of
the parameters; that is also exactly the dependence the backward pass
differentiates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import m3transformer as m3t
from ..backbone import (
    BevBlockParams,
    BevMap,
    GroupPlan,
    KeypointSet,
    MultiScaleVoxelFeatures,
    SparseConvLayer,
    SparseConvPlan,
    bev_bilinear_sample,
    bev_conv_net,
    bev_flatten,
    build_cnn_plans,
    build_group_plan,
    point_set_abstraction,
    run_voxel_cnn,
    voxel_set_abstraction,
)
from ..detect import (
    AnchorSet,
    Detection,
    Proposal,
    RcnnOutput,
    RcnnParams,
    RpnOutput,
    RpnParams,
    TargetAssignment,
    assign_targets,
    build_roi_plan,
    decode_proposals,
    generate_anchors,
    iou_confidence_target,
    rcnn_refine,
    refine_box,
    roi_grid_pool,
    rpn_forward,
)
from ..geometry import encode_box, iou_3d, nms
from ..losses import (
    LossReport,
    LossTerms,
    focal_loss,
    iou_confidence_loss,
    smooth_l1,
    total_loss,
)
from ..m3transformer import AttentionConfig, EncoderLayerParams, REP_ORDER
from ..metrics import GroundTruthBox
from ..numerics import (
    ParamSet,
    Tensor,
    add,
    constant,
    gather_rows,
    mul,
    scale,
    sigmoid,
    sub,
)
from ..pointcloud import NeighborIndex, PointCloud, SharedMlp, furthest_point_sampling, voxelize
from .config import PipelineConfig
from .scenes import Scene


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class FrozenStep:
    """Discrete choices of one training step, reusable across evaluations."""

    proposals: List[Proposal]
    assignment: TargetAssignment
    roi_plan: Optional[GroupPlan] = None


@dataclass
class GridStructure:
    """Voxel occupancy and conv tap pairs of one scene (parameter-independent)."""

    grid: object
    cnn_plans: List[SparseConvPlan]


@dataclass
class KeypointStructure:
    """Keypoint picks and grouping plans; cacheable only when sampling is
    not restricted to proposals (then positions depend on the weights)."""

    positions: np.ndarray
    vsa_plans: List[GroupPlan]
    point_plan: GroupPlan
    keypoint_index: NeighborIndex


@dataclass
class SceneForward:
    bev: BevMap
    keypoints: KeypointSet
    fused: Tensor  # (n, c_T) keypoint embedding after both fusion stages
    anchors: AnchorSet
    rpn_out: RpnOutput
    proposals: List[Proposal]
    rcnn_out: Optional[RcnnOutput]
    roi_plan: Optional[GroupPlan] = None


class Detector:
    """Parameter owner and forward/loss/inference entry points."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.params = ParamSet()
        self._rng = np.random.default_rng(cfg.seed)
        self._grid_cache: Dict[str, GridStructure] = {}
        self._keypoint_cache: Dict[str, KeypointStructure] = {}
        self._assign_cache: Dict[str, TargetAssignment] = {}
        self._anchor_cache: Optional[AnchorSet] = None
        self._build()

    # -- parameter construction ---------------------------------------------

    def _weight(self, name: str, fan_in: int, fan_out: int, zero: bool = False) -> Tensor:
        if zero:
            return self.params.add(name, np.zeros((fan_in, fan_out)))
        bound = 1.0 / math.sqrt(fan_in)
        return self.params.add(name, self._rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def _bias(self, name: str, width: int) -> Tensor:
        return self.params.add(name, np.zeros(width))

    def _ln(self, prefix: str, width: int) -> Tuple[Tensor, Tensor]:
        gain = self.params.add(f"{prefix}_gain", np.ones(width))
        bias = self.params.add(f"{prefix}_bias", np.zeros(width))
        return gain, bias

    def _mlp(self, prefix: str, d_in: int, d_hidden: int, d_out: int) -> SharedMlp:
        return SharedMlp(
            self._weight(f"{prefix}.w1", d_in, d_hidden),
            self._bias(f"{prefix}.b1", d_hidden),
            self._weight(f"{prefix}.w2", d_hidden, d_out),
            self._bias(f"{prefix}.b2", d_out),
        )

    def _encoder_layer(self, prefix: str, att: AttentionConfig) -> EncoderLayerParams:
        d, dh = att.d_model, att.head_dim
        heads = []
        for j in range(att.n_heads):
            heads.append(
                (
                    self._weight(f"{prefix}.head{j}.wq", d, dh),
                    self._weight(f"{prefix}.head{j}.wk", d, dh),
                    self._weight(f"{prefix}.head{j}.wv", d, dh),
                )
            )
        w_o = self._weight(f"{prefix}.w_o", att.n_heads * dh, d, zero=True)
        ln1 = self._ln(f"{prefix}.ln1", d)
        hidden = att.ffn_mult * d
        ffn_w1 = self._weight(f"{prefix}.ffn_w1", d, hidden)
        ffn_b1 = self._bias(f"{prefix}.ffn_b1", hidden)
        ffn_w2 = self._weight(f"{prefix}.ffn_w2", hidden, d, zero=True)
        ffn_b2 = self._bias(f"{prefix}.ffn_b2", d)
        ln2 = self._ln(f"{prefix}.ln2", d)
        return EncoderLayerParams(heads, w_o, ln1[0], ln1[1], ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2[0], ln2[1])

    def _build(self) -> None:
        cfg = self.cfg

        self.conv_layers: List[SparseConvLayer] = []
        c_prev = 4
        for i, (c_out, stride) in enumerate(zip(cfg.backbone_channels, (1, 2, 2, 2)), start=1):
            kernel = self._weight(f"backbone.conv{i}.kernel", 27 * c_prev, c_out)
            bias = self._bias(f"backbone.conv{i}.bias", c_out)
            gain, lbias = self._ln(f"backbone.conv{i}.ln", c_out)
            self.conv_layers.append(SparseConvLayer(kernel, bias, gain, lbias, stride))
            c_prev = c_out

        rng3 = cfg.axis_range()
        ez = int(math.ceil((rng3.z_max - rng3.z_min) / cfg.voxel_size[2] - 1e-9))
        for _ in range(3):
            ez = _ceil_div(ez, 2)
        self.h8 = ez
        c_flat = self.h8 * cfg.backbone_channels[3]
        self.bev_blocks: List[BevBlockParams] = []
        c_in = c_flat
        outs = [cfg.bev_hidden[1], cfg.bev_c_bev]
        for b, (hid, out) in enumerate(zip(cfg.bev_hidden, outs), start=1):
            down_kernel = self._weight(f"bev.block{b}.down_kernel", 9 * c_in, hid)
            down_bias = self._bias(f"bev.block{b}.down_bias", hid)
            down_gain, down_ln_bias = self._ln(f"bev.block{b}.down_ln", hid)
            up_kernel = self._weight(f"bev.block{b}.up_kernel", 9 * hid, out)
            up_bias = self._bias(f"bev.block{b}.up_bias", out)
            up_gain, up_ln_bias = self._ln(f"bev.block{b}.up_ln", out)
            self.bev_blocks.append(
                BevBlockParams(
                    down_kernel, down_bias, down_gain, down_ln_bias,
                    up_kernel, up_bias, up_gain, up_ln_bias,
                )
            )
            c_in = out

        self.point_mlp = self._mlp("sa.point", 4 + 3, cfg.keypoints_sa_hidden, cfg.keypoints_c_point)
        self.vsa_mlps: List[SharedMlp] = []
        for scale_name, c_grid, c_out in zip(
            ("1x", "2x", "4x", "8x"), cfg.backbone_channels, cfg.keypoints_vsa_channels
        ):
            self.vsa_mlps.append(
                self._mlp(f"sa.vsa{scale_name}", c_grid + 3, cfg.keypoints_vsa_hidden, c_out)
            )

        self.rep_widths = [*cfg.keypoints_vsa_channels, cfg.keypoints_c_point, cfg.bev_c_bev]
        self.c_t = sum(self.rep_widths)
        d = cfg.transformer_d_model
        self.reduce_weights = [
            self._weight(f"m3.reduce.{rep}.w", c, d) for rep, c in zip(REP_ORDER, self.rep_widths)
        ]
        rep_att = cfg.rep_attention()
        self.rep_layers = [
            self._encoder_layer(f"m3.rep.layer{i}", rep_att) for i in range(rep_att.n_layers)
        ]
        self.back_weights = [
            self._weight(f"m3.back.{rep}.w", d, c) for rep, c in zip(REP_ORDER, self.rep_widths)
        ]
        mut_att = cfg.mutual_attention()
        self.mutual_entry = self._weight("m3.mutual.entry.w", self.c_t, d)
        self.mutual_layers = [
            self._encoder_layer(f"m3.mutual.layer{i}", mut_att) for i in range(mut_att.n_layers)
        ]
        self.mutual_exit = self._weight("m3.mutual.exit.w", d, self.c_t)

        n_cls = len(cfg.class_names)
        per_pixel = n_cls * 2
        self.rpn_params = RpnParams(
            weight=self._weight("rpn.w", cfg.bev_c_bev, per_pixel * (n_cls + 7)),
            bias=self._bias("rpn.b", per_pixel * (n_cls + 7)),
        )
        self.roi_mlp = self._mlp("roi.mlp", self.c_t + 3, cfg.detect_roi_hidden, cfg.detect_roi_channels)
        grid_feat = cfg.detect_grid_n**3 * cfg.detect_roi_channels
        hid = cfg.detect_rcnn_hidden
        self.rcnn_params = RcnnParams(
            fc1_w=self._weight("rcnn.fc1_w", grid_feat, hid),
            fc1_b=self._bias("rcnn.fc1_b", hid),
            fc2_w=self._weight("rcnn.fc2_w", hid, hid),
            fc2_b=self._bias("rcnn.fc2_b", hid),
            conf_w=self._weight("rcnn.conf_w", hid, 1),
            conf_b=self._bias("rcnn.conf_b", 1),
            reg_w=self._weight("rcnn.reg_w", hid, 7),
            reg_b=self._bias("rcnn.reg_b", 7),
        )

    # -- forward --------------------------------------------------------------

    def _grid_structure(self, scene: Scene) -> GridStructure:
        """Voxelize and plan the conv stack once per scene; one Detector
        assumes stable scene contents per scene id."""
        cached = self._grid_cache.get(scene.scene_id)
        if cached is not None:
            return cached
        cfg = self.cfg
        grid = voxelize(scene.cloud, cfg.axis_range(), cfg.voxel_size)
        if len(grid) == 0:
            raise ValueError(f"scene {scene.scene_id} has no in-range points")
        struct = GridStructure(grid, build_cnn_plans(grid))
        self._grid_cache[scene.scene_id] = struct
        return struct

    def _fps_candidates(self, scene: Scene, proposals: List[Proposal]) -> np.ndarray:
        """Indices of points near any proposal footprint (BEV center
        distance within half-diagonal plus the grouping radius)."""
        xyz = scene.cloud.xyz
        keep = np.zeros(len(xyz), dtype=bool)
        margin = self.cfg.detect_roi_radius
        for p in proposals:
            b = p.box
            reach = 0.5 * math.hypot(b.l, b.w) + margin
            d2 = (xyz[:, 0] - b.x) ** 2 + (xyz[:, 1] - b.y) ** 2
            keep |= d2 <= reach * reach
        idx = np.nonzero(keep)[0]
        return idx if len(idx) else np.arange(len(xyz))

    def _keypoint_structure(
        self, scene: Scene, gs: GridStructure, proposals: Optional[List[Proposal]]
    ) -> KeypointStructure:
        cfg = self.cfg
        scoped = cfg.keypoints_fps_proposal_scope and proposals
        if not scoped:
            cached = self._keypoint_cache.get(scene.scene_id)
            if cached is not None:
                return cached
            candidates = np.arange(len(scene.cloud))
        else:
            candidates = self._fps_candidates(scene, proposals)
        sub = PointCloud(scene.cloud.points[candidates])
        seed = min(cfg.keypoints_fps_seed_index, len(sub) - 1)
        picks = candidates[furthest_point_sampling(sub, cfg.keypoints_n, seed)]
        positions = scene.cloud.xyz[picks]

        grid = gs.grid
        sizes = [grid.voxel_size * f for f in (1, 2, 4, 8)]
        radii = cfg.vsa_radii()
        vsa_plans: List[GroupPlan] = []
        for plan, size, radius in zip(gs.cnn_plans, sizes, radii):
            centers = grid.origin + (plan.out_keys + 0.5) * size
            index = NeighborIndex(centers, radius)
            vsa_plans.append(
                build_group_plan(positions, centers, index, radius, cfg.keypoints_vsa_max_neighbors)
            )
        point_index = NeighborIndex(scene.cloud.xyz, cfg.keypoints_point_radius)
        point_plan = build_group_plan(
            positions, scene.cloud.xyz, point_index, cfg.keypoints_point_radius,
            cfg.keypoints_vsa_max_neighbors,
        )
        kp_index = NeighborIndex(positions, cfg.detect_roi_radius)
        struct = KeypointStructure(positions, vsa_plans, point_plan, kp_index)
        if not scoped:
            self._keypoint_cache[scene.scene_id] = struct
        return struct

    def _keypoint_features(
        self, scene: Scene, ks: KeypointStructure, ms: MultiScaleVoxelFeatures, bev: BevMap
    ) -> KeypointSet:
        cfg = self.cfg
        positions = ks.positions
        f_vox = voxel_set_abstraction(
            positions, ms, cfg.vsa_radii(), self.vsa_mlps, cfg.keypoints_vsa_max_neighbors,
            plans=ks.vsa_plans,
        )
        f_point = point_set_abstraction(
            positions, scene.cloud, cfg.keypoints_point_radius, self.point_mlp,
            cfg.keypoints_vsa_max_neighbors, plan=ks.point_plan,
        )
        f_bev = bev_bilinear_sample(bev, positions)
        return KeypointSet(positions, f_vox, f_point, f_bev)

    def _fuse(self, kp: KeypointSet) -> Tensor:
        cfg = self.cfg
        feats = kp.ordered_features()
        if cfg.transformer_mode == "bypass":
            return m3t.concat_split(feats)
        fhat = m3t.feature_reduce(feats, self.reduce_weights)
        t_list = m3t.multi_rep_scale_layer(fhat, self.rep_layers, self.back_weights, cfg.rep_attention())
        seq = m3t.concat_split(t_list)
        return m3t.mutual_relation_layer(
            seq, self.mutual_entry, self.mutual_layers, self.mutual_exit, cfg.mutual_attention()
        )

    def forward_scene(
        self,
        scene: Scene,
        mode: str = "train",
        frozen: Optional[FrozenStep] = None,
    ) -> SceneForward:
        cfg = self.cfg
        gs = self._grid_structure(scene)
        ms = run_voxel_cnn(gs.grid, self.conv_layers, plans=gs.cnn_plans)
        bev = bev_conv_net(bev_flatten(ms.grids[3]), self.bev_blocks)

        # proposals need only the BEV branch, and proposal-scoped keypoint
        # sampling needs the proposals, so the heads run before fusion
        anchors = self._anchors(bev)
        rpn_out = rpn_forward(bev, self.rpn_params, anchors)
        roi_plan = None
        if frozen is not None:
            proposals = frozen.proposals
            roi_plan = frozen.roi_plan
        elif mode == "train":
            proposals = decode_proposals(rpn_out, anchors, cfg.detect_train_top_k, cfg.detect_train_nms)
        else:
            proposals = decode_proposals(rpn_out, anchors, cfg.detect_eval_top_k, cfg.detect_eval_nms)

        ks = self._keypoint_structure(scene, gs, proposals)
        kp = self._keypoint_features(scene, ks, ms, bev)
        fused = self._fuse(kp)

        rcnn_out = None
        if proposals:
            if roi_plan is None:
                roi_plan = build_roi_plan(
                    proposals,
                    kp.positions,
                    ks.keypoint_index,
                    cfg.detect_grid_n,
                    cfg.detect_roi_max_neighbors,
                    cfg.detect_roi_radius,
                )
            grid_feats = roi_grid_pool(
                proposals,
                kp.positions,
                fused,
                None,
                cfg.detect_grid_n,
                cfg.detect_roi_max_neighbors,
                cfg.detect_roi_radius,
                self.roi_mlp,
                plan=roi_plan,
            )
            rcnn_out = rcnn_refine(grid_feats, self.rcnn_params)
        return SceneForward(bev, kp, fused, anchors, rpn_out, proposals, rcnn_out, roi_plan)

    def _anchors(self, bev: BevMap) -> AnchorSet:
        if self._anchor_cache is None:
            self._anchor_cache = generate_anchors(bev, self.cfg.class_specs())
        return self._anchor_cache

    # -- training loss ----------------------------------------------------------

    def _rpn_losses(self, fwd: SceneForward, assignment: TargetAssignment):
        cfg = self.cfg
        labels = assignment.labels
        n_pos = assignment.n_positive
        n_cls = len(cfg.class_names)

        active = np.nonzero(labels != 0)[0]
        logits = gather_rows(fwd.rpn_out.class_logits, active)
        probs = sigmoid(logits)
        targets = np.zeros((len(active), n_cls))
        pos_rows = labels[active] == 1
        if np.any(pos_rows):
            cls_of_anchor = fwd.anchors.class_ids[active[pos_rows]]
            targets[np.nonzero(pos_rows)[0], cls_of_anchor] = 1.0
        # p_t = p where target=1, else 1-p;   written as (1-p) + t*(2p - 1)
        t_const = constant(targets)
        ones = constant(np.ones_like(targets))
        p_t = add(sub(ones, probs), mul(t_const, sub(scale(probs, 2.0), ones)))
        alpha_a = np.where(targets == 1.0, cfg.loss_alpha, 1.0 - cfg.loss_alpha)
        l_cls = focal_loss(p_t, alpha_a, cfg.loss_gamma, n_pos)

        pos_idx = np.nonzero(labels == 1)[0]
        pred = gather_rows(fwd.rpn_out.deltas, pos_idx)
        l_reg = smooth_l1(pred, assignment.deltas[pos_idx], cfg.loss_smooth_l1_beta, n_positive=n_pos)
        return l_cls, l_reg, n_pos

    def _rcnn_losses(self, fwd: SceneForward, gts: Sequence[GroundTruthBox]):
        cfg = self.cfg
        gt_boxes = [g.box for g in gts]
        if fwd.rcnn_out is None:
            zero = constant(np.zeros(()))
            return zero, zero
        conf_targets = np.array(
            [
                [iou_confidence_target(p.box, gt_boxes, cfg.detect_iou_conf_lo, cfg.detect_iou_conf_hi)]
                for p in fwd.proposals
            ]
        )
        l_iou = iou_confidence_loss(fwd.rcnn_out.confidence, conf_targets)

        reg_rows: List[int] = []
        reg_targets: List[np.ndarray] = []
        for i, p in enumerate(fwd.proposals):
            if not gt_boxes:
                break
            ious = [iou_3d(p.box, g) for g in gt_boxes]
            best = int(np.argmax(ious))
            if ious[best] >= cfg.detect_rcnn_reg_iou:
                reg_rows.append(i)
                reg_targets.append(encode_box(gt_boxes[best], p.box).as_array())
        if reg_rows:
            pred = gather_rows(fwd.rcnn_out.deltas, np.array(reg_rows))
            l_ref = smooth_l1(pred, np.stack(reg_targets), cfg.loss_smooth_l1_beta, n_positive=len(reg_rows))
        else:
            l_ref = constant(np.zeros(()))
        return l_iou, l_ref

    def loss_scene(
        self, scene: Scene, frozen: Optional[FrozenStep] = None
    ) -> Tuple[Tensor, LossReport, FrozenStep]:
        cfg = self.cfg
        fwd = self.forward_scene(scene, mode="train", frozen=frozen)
        if frozen is not None:
            assignment = frozen.assignment
        else:
            assignment = self._assign_cache.get(scene.scene_id)
            if assignment is None:
                assignment = assign_targets(
                    fwd.anchors,
                    [g.box for g in scene.gts],
                    [g.class_id for g in scene.gts],
                    cfg.detect_pos_iou,
                    cfg.detect_neg_iou,
                )
                self._assign_cache[scene.scene_id] = assignment
        l_cls, l_reg, n_pos = self._rpn_losses(fwd, assignment)
        l_iou, l_ref = self._rcnn_losses(fwd, scene.gts)
        terms = LossTerms(l_cls, l_reg, l_iou, l_ref, n_pos)
        loss, report = total_loss(terms, cfg.loss_weights())
        return loss, report, FrozenStep(fwd.proposals, assignment, fwd.roi_plan)

    # -- inference ---------------------------------------------------------------

    def detect_scene(self, scene: Scene) -> List[Detection]:
        cfg = self.cfg
        fwd = self.forward_scene(scene, mode="eval")
        if fwd.rcnn_out is None:
            return []
        confs = fwd.rcnn_out.confidence.data[:, 0]
        deltas = fwd.rcnn_out.deltas.data
        refined = [refine_box(p.box, deltas[i]) for i, p in enumerate(fwd.proposals)]
        kept = nms(
            [(b, float(c)) for b, c in zip(refined, confs)],
            cfg.detect_final_nms,
            "bev",
        )
        dets = [
            Detection(refined[i], float(confs[i]), fwd.proposals[i].class_id)
            for i in kept
        ]
        return dets

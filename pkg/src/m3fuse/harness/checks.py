"""Gradient-check suites for every differentiable stage, including the
full backbone -> fusion -> heads composite on a generated toy scene."""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .. import m3transformer as m3t
from ..backbone import (
    BevBlockParams,
    BevMap,
    SparseConvLayer,
    bev_conv_net,
    sparse_conv_block,
)
from ..losses import binary_cross_entropy, focal_loss, smooth_l1
from ..numerics import (
    GradCheckReport,
    Graph,
    ParamSet,
    Tensor,
    attn_mix,
    bmm_nt,
    clip,
    concat_cols,
    concat_rows,
    constant,
    exp,
    gather_rows,
    grad_check,
    layer_norm,
    log,
    matmul,
    mul,
    mul_rows,
    powc,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    scatter_rows,
    segment_max,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
    transpose,
)
from ..pointcloud import AxisRange, PointCloud, SharedMlp, set_abstraction, voxelize
from .config import PipelineConfig
from .model import Detector
from .scenes import generate_synthetic_scene

Suite = Tuple[str, GradCheckReport]


def _params_from(rng, shapes: Dict[str, tuple]) -> Dict[str, Tensor]:
    return {
        name: Tensor(rng.normal(scale=0.5, size=shape), requires_grad=True)
        for name, shape in shapes.items()
    }


def _scalar(x: Tensor) -> Tensor:
    # weighted sum keeps the probe sensitive to every output coordinate;
    # the small magnitude keeps finite-difference round-off below the
    # 1e-8 denominator floor of the relative-error metric
    w = np.linspace(0.5, 1.5, x.data.size).reshape(x.data.shape) / (10.0 * x.data.size)
    return reduce_sum(mul(x, constant(w)))


def check_core_ops(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = _params_from(rng, {"a": (3, 4), "b": (4, 5), "g": (5,), "be": (5,), "c": (6, 5)})
    idx = np.array([0, 2, 2, 1])
    bounds = np.array([0, 2, 2, 6])

    def f():
        x = matmul(p["a"], p["b"])
        x = layer_norm(x, p["g"], p["be"], 1e-5)
        x = relu(x)
        x = softmax_rows(x)
        y = gather_rows(p["c"], idx)
        y = scatter_rows(y, np.array([1, 3, 3, 0]), 6)
        z = concat_rows([x, y])
        z = mul_rows(z, np.linspace(0.5, 2.0, z.shape[0]))
        z = concat_cols([z, exp(scale(z, 0.1))])
        z = slice_cols(z, 1, 9)
        z = reshape(z, (z.data.size // 4, 4))
        s1 = reduce_mean(mul(z, z))
        s2 = reduce_max(z)
        s3 = _scalar(segment_max(z, np.array([0, 3, 3, z.shape[0]])))
        s4 = reduce_sum(sigmoid(transpose(matmul(p["a"], p["b"]))))
        s5 = reduce_sum(powc(clip(softmax_rows(matmul(p["a"], p["b"])), 1e-6, 1 - 1e-6), 1.7))
        return reduce_sum(concat_cols([reshape(v, (1, 1)) for v in (s1, s2, s3, s4, s5)]))

    return grad_check(f, p)


def check_attention_kernels(seed: int = 1) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = _params_from(rng, {"q": (6, 3), "k": (6, 3), "v": (6, 4)})

    def f():
        logits = scale(bmm_nt(p["q"], p["k"], 3, 3), 0.7)
        w = softmax_rows(logits)
        out = attn_mix(w, p["v"], 3, 3)
        return _scalar(out)

    return grad_check(f, p)


def check_set_abstraction(seed: int = 2) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = _params_from(rng, {"w1": (5, 6), "b1": (6,), "w2": (6, 3), "b2": (3,), "feats": (4, 2)})
    mlp = SharedMlp(p["w1"], p["b1"], p["w2"], p["b2"])
    xyz = rng.normal(size=(4, 3))
    center = np.zeros(3)

    def f():
        return _scalar(set_abstraction(center, xyz, p["feats"], mlp, relative=True))

    return grad_check(f, p)


def check_sparse_conv(seed: int = 3) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    pts = np.concatenate(
        [rng.uniform(0.0, 5.0, size=(60, 3)), rng.uniform(0.0, 1.0, size=(60, 1))], axis=1
    )
    grid = voxelize(PointCloud(pts), AxisRange(0, 5, 0, 5, 0, 5), (1.0, 1.0, 1.0))
    p = _params_from(rng, {"kernel": (27 * 4, 3)})
    gain = Tensor(np.ones(3), requires_grad=True)
    bias = Tensor(np.zeros(3), requires_grad=True)
    cbias = Tensor(np.zeros(3), requires_grad=True)
    p.update({"ln_gain": gain, "ln_bias": bias, "bias": cbias})

    def f():
        layer = SparseConvLayer(p["kernel"], p["bias"], p["ln_gain"], p["ln_bias"], stride=2)
        out = sparse_conv_block(grid, layer)
        return _scalar(out.feats)

    return grad_check(f, p)


def check_bev_net(seed: int = 4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    nx = ny = 8
    c_in = 3
    p = _params_from(
        rng,
        {
            "x": (nx * ny, c_in),
            "dk1": (9 * c_in, 3),
            "uk1": (9 * 3, 3),
            "dk2": (9 * 3, 3),
            "uk2": (9 * 3, 2),
        },
    )
    extra = {}
    for name, width in (
        ("db1", 3), ("dg1", 3), ("dlb1", 3), ("ub1", 3), ("ug1", 3), ("ulb1", 3),
        ("db2", 3), ("dg2", 3), ("dlb2", 3), ("ub2", 2), ("ug2", 2), ("ulb2", 2),
    ):
        init = np.ones(width) if name.startswith(("dg", "ug")) else rng.normal(scale=0.1, size=width)
        extra[name] = Tensor(init, requires_grad=True)
    p.update(extra)

    def f():
        bev = BevMap(p["x"], nx, ny, np.zeros(2), np.ones(2))
        blocks = [
            BevBlockParams(p["dk1"], p["db1"], p["dg1"], p["dlb1"], p["uk1"], p["ub1"], p["ug1"], p["ulb1"]),
            BevBlockParams(p["dk2"], p["db2"], p["dg2"], p["dlb2"], p["uk2"], p["ub2"], p["ug2"], p["ulb2"]),
        ]
        out = bev_conv_net(bev, blocks)
        return _scalar(out.tensor)

    return grad_check(f, p)


def _toy_m3_params(rng, widths, d_model, n_heads, n_layers):
    ps: Dict[str, Tensor] = {}

    def w(name, shape):
        ps[name] = Tensor(rng.normal(scale=0.4, size=shape), requires_grad=True)
        return ps[name]

    reduce_w = [w(f"red{i}", (c, d_model)) for i, c in enumerate(widths)]
    back_w = [w(f"back{i}", (d_model, c)) for i, c in enumerate(widths)]

    def enc(prefix):
        dh = d_model // n_heads
        heads = [
            (w(f"{prefix}.h{j}.q", (d_model, dh)), w(f"{prefix}.h{j}.k", (d_model, dh)), w(f"{prefix}.h{j}.v", (d_model, dh)))
            for j in range(n_heads)
        ]
        layer = m3t.EncoderLayerParams(
            heads=heads,
            w_o=w(f"{prefix}.wo", (n_heads * dh, d_model)),
            ln1_gain=w(f"{prefix}.g1", (d_model,)),
            ln1_bias=w(f"{prefix}.b1", (d_model,)),
            ffn_w1=w(f"{prefix}.f1", (d_model, 2 * d_model)),
            ffn_b1=w(f"{prefix}.fb1", (2 * d_model,)),
            ffn_w2=w(f"{prefix}.f2", (2 * d_model, d_model)),
            ffn_b2=w(f"{prefix}.fb2", (d_model,)),
            ln2_gain=w(f"{prefix}.g2", (d_model,)),
            ln2_bias=w(f"{prefix}.b2", (d_model,)),
        )
        ps[f"{prefix}.g1"].data = np.ones(d_model)
        ps[f"{prefix}.g2"].data = np.ones(d_model)
        return layer

    rep_layers = [enc(f"rep{i}") for i in range(n_layers)]
    mut_layers = [enc(f"mut{i}") for i in range(n_layers)]
    c_t = sum(widths)
    entry = w("entry", (c_t, d_model))
    exit_w = w("exit", (d_model, c_t))
    return ps, reduce_w, rep_layers, back_w, entry, mut_layers, exit_w


def check_m3_block(seed: int = 5, n_keypoints: int = 8, d_model: int = 16) -> GradCheckReport:
    """Full fusion block (reduce -> intra-point -> concat -> inter-point)."""
    rng = np.random.default_rng(seed)
    widths = [3, 4, 4, 3, 2, 4]
    cfg = m3t.AttentionConfig(d_model=d_model, n_heads=2, n_layers=1)
    ps, reduce_w, rep_layers, back_w, entry, mut_layers, exit_w = _toy_m3_params(
        rng, widths, d_model, cfg.n_heads, cfg.n_layers
    )
    feats = [Tensor(rng.normal(size=(n_keypoints, c)), requires_grad=True) for c in widths]
    for i, t in enumerate(feats):
        ps[f"feat{i}"] = t

    def f():
        fhat = m3t.feature_reduce(feats, reduce_w)
        t_list = m3t.multi_rep_scale_layer(fhat, rep_layers, back_w, cfg)
        seq = m3t.concat_split(t_list)
        out = m3t.mutual_relation_layer(seq, entry, mut_layers, exit_w, cfg)
        return _scalar(out)

    return grad_check(f, ps)


def check_losses(seed: int = 6) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = _params_from(rng, {"logits": (5, 2), "deltas": (3, 7), "conf_raw": (4, 1)})
    targets = np.zeros((5, 2))
    targets[1, 0] = 1.0
    targets[3, 1] = 1.0
    alpha = np.where(targets == 1.0, 0.25, 0.75)
    delta_targets = rng.normal(scale=0.3, size=(3, 7))
    conf_targets = rng.uniform(size=(4, 1))

    def f():
        probs = sigmoid(p["logits"])
        ones = constant(np.ones_like(targets))
        p_t = sub(ones, probs) + mul(constant(targets), sub(scale(probs, 2.0), ones))
        l1 = focal_loss(p_t, alpha, 2.0, 2)
        l2 = smooth_l1(p["deltas"], delta_targets, 1.0 / 9.0, n_positive=3)
        l3 = binary_cross_entropy(sigmoid(p["conf_raw"]), conf_targets)
        return l1 + l2 + l3

    return grad_check(f, p)


def tiny_config() -> PipelineConfig:
    """A configuration small enough to finite-difference end to end."""
    return dataclasses.replace(
        PipelineConfig(),
        seed=11,
        range_x_min=-8.0,
        range_x_max=8.0,
        range_y_min=-8.0,
        range_y_max=8.0,
        range_z_min=-2.0,
        range_z_max=2.0,
        voxel_size=[0.5, 0.5, 0.5],
        # widths >= 3 keep the per-cell layer norms away from the nearly
        # degenerate two-channel regime where finite differences at
        # h=1e-5 are dominated by curvature
        backbone_channels=[3, 3, 3, 4],
        keypoints_n=6,
        keypoints_c_point=3,
        keypoints_point_radius=1.5,
        keypoints_sa_hidden=3,
        keypoints_vsa_hidden=3,
        keypoints_vsa_channels=[3, 3, 3, 3],
        keypoints_vsa_max_neighbors=4,
        bev_hidden=[3, 3],
        bev_c_bev=4,
        transformer_d_model=4,
        transformer_rep_layers=1,
        transformer_rep_heads=2,
        transformer_mutual_layers=1,
        transformer_mutual_heads=2,
        detect_train_top_k=4,
        detect_grid_n=2,
        detect_roi_max_neighbors=3,
        detect_roi_hidden=3,
        detect_roi_channels=2,
        detect_rcnn_hidden=4,
        gen_n_objects_min=2,
        gen_n_objects_max=2,
        gen_clutter_points=30,
    )


def check_composite(seed: int = 11) -> GradCheckReport:
    """Finite-difference the full training loss on a toy scene.

    The proposal set and anchor assignment are frozen at the base point,
    which is exactly the dependence structure the backward pass sees.
    """
    cfg = tiny_config()
    scene = generate_synthetic_scene(cfg, seed=seed)
    model = Detector(cfg)
    # move every zero-initialized parameter to a generic point: residual
    # projections off zero so attention paths carry signal, and biases off
    # zero so no ReLU sits exactly at its kink (zero pooled features times
    # zero bias would put the finite difference on a subgradient corner)
    rng = np.random.default_rng(seed + 1)
    for name, t in model.params.items():
        if name.endswith((".w_o", ".ffn_w2")):
            t.data = rng.normal(scale=0.2, size=t.data.shape)
        elif np.all(t.data == 0.0):
            t.data = rng.normal(scale=0.05, size=t.data.shape)
    _, _, frozen = model.loss_scene(scene)

    def f():
        # constant scaling keeps |f| small so finite-difference round-off
        # stays below the 1e-8 denominator floor; relative errors of the
        # backward rules are unchanged by it
        loss, _, _ = model.loss_scene(scene, frozen=frozen)
        return scale(loss, 1e-3)

    return grad_check(f, model.params)


SUITES: Dict[str, Callable[[], GradCheckReport]] = {
    "core-ops": check_core_ops,
    "attention-kernels": check_attention_kernels,
    "set-abstraction": check_set_abstraction,
    "sparse-conv": check_sparse_conv,
    "bev-net": check_bev_net,
    "m3-block": check_m3_block,
    "losses": check_losses,
    "composite": check_composite,
}


def run_suites(names: Optional[List[str]] = None) -> List[Suite]:
    names = names or list(SUITES)
    out: List[Suite] = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown gradcheck suite {name!r}")
        out.append((name, SUITES[name]()))
    return out

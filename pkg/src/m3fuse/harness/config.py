"""Pipeline configuration: a flat namespaced key-value document.

Keys map to dataclass fields by replacing '.' with '_'.  Values are
typed by the field default (float, int, bool, str, or comma-separated
list).  Parsing, validation, and serialization round-trip exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List

from ..detect import ClassSpec
from ..losses import LossWeights
from ..m3transformer import AttentionConfig
from ..pointcloud import AxisRange


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # global
    seed: int = 7

    # scene extent and voxelization
    range_x_min: float = -10.0
    range_x_max: float = 10.0
    range_y_min: float = -10.0
    range_y_max: float = 10.0
    range_z_min: float = -2.0
    range_z_max: float = 2.0
    voxel_size: List[float] = field(default_factory=lambda: [0.25, 0.25, 0.25])

    # voxel CNN output channels at scales 1x, 2x, 4x, 8x
    backbone_channels: List[int] = field(default_factory=lambda: [8, 16, 16, 16])

    # keypoint sampling and set abstraction
    keypoints_n: int = 128
    keypoints_fps_seed_index: int = 0
    keypoints_fps_proposal_scope: bool = False  # restrict FPS to proposal neighborhoods
    keypoints_c_point: int = 16
    keypoints_point_radius: float = 1.0
    keypoints_sa_hidden: int = 16
    keypoints_vsa_radii: List[float] = field(default_factory=list)  # empty = 2x voxel diagonal
    keypoints_vsa_hidden: int = 16
    keypoints_vsa_channels: List[int] = field(default_factory=lambda: [8, 16, 16, 16])
    keypoints_vsa_max_neighbors: int = 16

    # BEV encoder-decoder
    bev_hidden: List[int] = field(default_factory=lambda: [16, 16])
    bev_c_bev: int = 16

    # transformer fusion
    transformer_d_model: int = 32
    transformer_rep_layers: int = 2
    transformer_rep_heads: int = 4
    transformer_mutual_layers: int = 2
    transformer_mutual_heads: int = 4
    transformer_ffn_mult: int = 2
    transformer_scale_kind: str = "d_in"
    transformer_mode: str = "full"  # full | bypass (no attention fusion)

    # detection heads
    detect_pos_iou: float = 0.6
    detect_neg_iou: float = 0.45
    detect_train_top_k: int = 24
    detect_train_nms: float = 0.8
    detect_eval_top_k: int = 16
    detect_eval_nms: float = 0.7
    detect_final_nms: float = 0.1
    detect_grid_n: int = 3
    detect_roi_max_neighbors: int = 8
    detect_roi_radius: float = 2.4
    detect_roi_hidden: int = 16
    detect_roi_channels: int = 16
    detect_rcnn_hidden: int = 32
    detect_rcnn_reg_iou: float = 0.35
    detect_iou_conf_lo: float = 0.25
    detect_iou_conf_hi: float = 0.75

    # losses
    loss_beta_reg: float = 2.0
    loss_beta_iou: float = 1.0
    loss_beta_ref: float = 1.0
    loss_alpha: float = 0.25
    loss_gamma: float = 2.0
    loss_smooth_l1_beta: float = 1.0 / 9.0

    # optimizer and schedule
    optim_lr_peak: float = 0.01
    optim_weight_decay: float = 0.01
    optim_beta1: float = 0.9
    optim_beta2: float = 0.999
    optim_eps: float = 1e-8
    optim_warmup_frac: float = 0.3

    # training loop
    train_batch_size: int = 2
    train_epochs: int = 150
    train_workers: int = 1

    # object classes (parallel lists)
    class_names: List[str] = field(default_factory=lambda: ["car"])
    class_lengths: List[float] = field(default_factory=lambda: [3.0])
    class_heights: List[float] = field(default_factory=lambda: [1.5])
    class_widths: List[float] = field(default_factory=lambda: [1.6])
    class_z_centers: List[float] = field(default_factory=lambda: [-0.8])

    # synthetic scene generator
    gen_n_objects_min: int = 2
    gen_n_objects_max: int = 4
    gen_clutter_points: int = 250
    gen_dim_jitter: float = 0.12
    gen_sparse_fraction: float = 0.0

    # evaluation
    eval_iou_threshold: float = 0.5
    eval_iou_kind: str = "bev"
    eval_level_iou_threshold: float = 0.5
    eval_level_iou_kind: str = "3d"

    # derived accessors -----------------------------------------------------

    def axis_range(self) -> AxisRange:
        return AxisRange(
            self.range_x_min,
            self.range_x_max,
            self.range_y_min,
            self.range_y_max,
            self.range_z_min,
            self.range_z_max,
        )

    def class_specs(self) -> List[ClassSpec]:
        return [
            ClassSpec(n, l, h, w, z)
            for n, l, h, w, z in zip(
                self.class_names,
                self.class_lengths,
                self.class_heights,
                self.class_widths,
                self.class_z_centers,
            )
        ]

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            beta_reg=self.loss_beta_reg,
            beta_iou=self.loss_beta_iou,
            beta_ref=self.loss_beta_ref,
            alpha=self.loss_alpha,
            gamma=self.loss_gamma,
        )

    def rep_attention(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.transformer_d_model,
            n_heads=self.transformer_rep_heads,
            n_layers=self.transformer_rep_layers,
            ffn_mult=self.transformer_ffn_mult,
            scale_kind=self.transformer_scale_kind,
        )

    def mutual_attention(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.transformer_d_model,
            n_heads=self.transformer_mutual_heads,
            n_layers=self.transformer_mutual_layers,
            ffn_mult=self.transformer_ffn_mult,
            scale_kind=self.transformer_scale_kind,
        )

    def vsa_radii(self) -> List[float]:
        if self.keypoints_vsa_radii:
            return list(self.keypoints_vsa_radii)
        from ..backbone import default_vsa_radii

        return default_vsa_radii(self.voxel_size)


_KEY_TO_FIELD = {f.name.replace("_", ".", 1): f.name for f in fields(PipelineConfig)}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return v
    if isinstance(v, list):
        return ", ".join(_format_value(x) for x in v)
    raise ConfigError(f"unsupported config value type {type(v)}")


def _parse_scalar(text: str, template):
    text = text.strip()
    if isinstance(template, bool):
        if text not in ("true", "false"):
            raise ConfigError(f"boolean must be true/false, got {text!r}")
        return text == "true"
    if isinstance(template, float):
        return float(text)
    if isinstance(template, int):
        return int(text)
    return text


def _parse_value(text: str, template):
    if isinstance(template, list):
        text = text.strip()
        if not text:
            return []
        elem = template[0] if template else ""
        return [_parse_scalar(p, elem) for p in text.split(",")]
    return _parse_scalar(text, template)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        key = _FIELD_TO_KEY[f.name]
        lines.append(f"{key} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> PipelineConfig:
    defaults = PipelineConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        fname = _KEY_TO_FIELD[key]
        try:
            values[fname] = _parse_value(val, getattr(defaults, fname))
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    cfg = dataclasses.replace(defaults, **values)
    validate_config(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))


def validate_config(cfg: PipelineConfig) -> None:
    def positive(name, v):
        if not v > 0:
            raise ConfigError(f"{name} must be positive, got {v}")

    if cfg.range_x_max <= cfg.range_x_min or cfg.range_y_max <= cfg.range_y_min or cfg.range_z_max <= cfg.range_z_min:
        raise ConfigError("degenerate scene range")
    if len(cfg.voxel_size) != 3 or any(v <= 0 for v in cfg.voxel_size):
        raise ConfigError("voxel.size needs three positive components")
    if len(cfg.backbone_channels) != 4 or any(c < 2 for c in cfg.backbone_channels):
        raise ConfigError("backbone.channels needs four entries >= 2")
    if len(cfg.keypoints_vsa_channels) != 4:
        raise ConfigError("keypoints.vsa_channels needs four entries")
    if cfg.keypoints_vsa_radii and (len(cfg.keypoints_vsa_radii) != 4 or any(r <= 0 for r in cfg.keypoints_vsa_radii)):
        raise ConfigError("keypoints.vsa_radii needs four positive entries (or empty for auto)")
    positive("keypoints.n", cfg.keypoints_n)
    positive("keypoints.point_radius", cfg.keypoints_point_radius)
    if len(cfg.bev_hidden) != 2:
        raise ConfigError("bev.hidden needs two entries")
    positive("bev.c_bev", cfg.bev_c_bev)
    positive("transformer.d_model", cfg.transformer_d_model)
    for stage, heads in (("rep", cfg.transformer_rep_heads), ("mutual", cfg.transformer_mutual_heads)):
        positive(f"transformer.{stage}_heads", heads)
        if cfg.transformer_d_model % heads:
            raise ConfigError(
                f"transformer.d_model {cfg.transformer_d_model} not divisible by {stage} heads {heads}"
            )
    positive("transformer.rep_layers", cfg.transformer_rep_layers)
    positive("transformer.mutual_layers", cfg.transformer_mutual_layers)
    if cfg.transformer_scale_kind not in ("d_in", "d_k"):
        raise ConfigError("transformer.scale_kind must be d_in or d_k")
    if cfg.transformer_mode not in ("full", "bypass"):
        raise ConfigError("transformer.mode must be full or bypass")
    if not (0.0 <= cfg.detect_neg_iou <= cfg.detect_pos_iou <= 1.0):
        raise ConfigError("need 0 <= detect.neg_iou <= detect.pos_iou <= 1")
    for name in ("detect_train_nms", "detect_eval_nms", "detect_final_nms"):
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name.replace('_', '.', 1)} must be in [0, 1]")
    positive("detect.train_top_k", cfg.detect_train_top_k)
    positive("detect.eval_top_k", cfg.detect_eval_top_k)
    positive("detect.grid_n", cfg.detect_grid_n)
    positive("detect.roi_radius", cfg.detect_roi_radius)
    positive("detect.roi_max_neighbors", cfg.detect_roi_max_neighbors)
    if not cfg.detect_iou_conf_lo < cfg.detect_iou_conf_hi:
        raise ConfigError("need detect.iou_conf_lo < detect.iou_conf_hi")
    for name in ("loss_beta_reg", "loss_beta_iou", "loss_beta_ref", "loss_alpha", "loss_gamma"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name.replace('_', '.', 1)} must be nonnegative")
    positive("loss.smooth_l1_beta", cfg.loss_smooth_l1_beta)
    positive("optim.lr_peak", cfg.optim_lr_peak)
    if not 0.0 < cfg.optim_warmup_frac < 1.0:
        raise ConfigError("optim.warmup_frac must be in (0, 1)")
    positive("train.batch_size", cfg.train_batch_size)
    positive("train.epochs", cfg.train_epochs)
    positive("train.workers", cfg.train_workers)
    n_cls = len(cfg.class_names)
    if n_cls == 0:
        raise ConfigError("at least one class required")
    for lst, name in (
        (cfg.class_lengths, "class.lengths"),
        (cfg.class_heights, "class.heights"),
        (cfg.class_widths, "class.widths"),
        (cfg.class_z_centers, "class.z_centers"),
    ):
        if len(lst) != n_cls:
            raise ConfigError(f"{name} must have {n_cls} entries")
    for lst in (cfg.class_lengths, cfg.class_heights, cfg.class_widths):
        if any(v <= 0 for v in lst):
            raise ConfigError("class dimensions must be positive")
    if cfg.eval_iou_kind not in ("bev", "3d") or cfg.eval_level_iou_kind not in ("bev", "3d"):
        raise ConfigError("eval IoU kind must be bev or 3d")
    if not 0.0 <= cfg.gen_sparse_fraction <= 1.0:
        raise ConfigError("gen.sparse_fraction must be in [0, 1]")
    if cfg.gen_n_objects_min < 0 or cfg.gen_n_objects_max < cfg.gen_n_objects_min:
        raise ConfigError("need 0 <= gen.n_objects_min <= gen.n_objects_max")


def desk_config() -> PipelineConfig:
    """The default desk-scale configuration (runs the suite in minutes)."""
    return PipelineConfig()


def apply_head_variant(cfg: PipelineConfig, variant: str) -> PipelineConfig:
    """Switch both transformer stages to one of the two published
    encoder-layer/head combinations: '2x4' or '1x8'."""
    if variant == "2x4":
        layers, heads = 2, 4
    elif variant == "1x8":
        layers, heads = 1, 8
    else:
        raise ConfigError(f"unknown head variant {variant!r} (expected 2x4 or 1x8)")
    return dataclasses.replace(
        cfg,
        transformer_rep_layers=layers,
        transformer_rep_heads=heads,
        transformer_mutual_layers=layers,
        transformer_mutual_heads=heads,
    )


def kitti_reference_config() -> PipelineConfig:
    """Full-scale reference settings, kept for documentation parity.

    These match the published system configuration; the desk config
    shrinks everything proportionally so the suite runs on one core.
    """
    return dataclasses.replace(
        PipelineConfig(),
        range_x_min=0.0,
        range_x_max=70.4,
        range_y_min=-40.0,
        range_y_max=40.0,
        range_z_min=-3.0,
        range_z_max=1.0,
        voxel_size=[0.05, 0.05, 0.1],
        backbone_channels=[16, 32, 64, 64],
        keypoints_n=2048,
        keypoints_fps_proposal_scope=True,
        keypoints_c_point=32,
        keypoints_vsa_channels=[16, 32, 64, 64],
        bev_hidden=[128, 128],
        bev_c_bev=512,
        transformer_d_model=256,
        transformer_rep_layers=1,
        transformer_rep_heads=8,
        transformer_mutual_layers=2,
        transformer_mutual_heads=4,
        detect_train_top_k=512,
        detect_train_nms=0.8,
        detect_eval_top_k=100,
        detect_eval_nms=0.7,
        detect_grid_n=6,
        detect_roi_max_neighbors=16,
        detect_roi_radius=2.4,
        detect_rcnn_reg_iou=0.55,
        loss_alpha=0.25,
        loss_gamma=2.0,
        optim_lr_peak=0.01,
        optim_weight_decay=0.01,
        train_batch_size=8,
        train_epochs=80,
        eval_iou_threshold=0.7,
    )

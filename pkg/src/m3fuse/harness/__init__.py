"""Configuration, synthetic scenes, training/evaluation drivers, CLI."""

from .config import (
    ConfigError,
    PipelineConfig,
    apply_head_variant,
    desk_config,
    kitti_reference_config,
    load_config,
    parse_config,
    save_config,
    serialize_config,
    validate_config,
)
from .evaluate import metric_value, run_evaluation
from .model import Detector, FrozenStep
from .scenes import (
    GenerationError,
    Scene,
    generate_synthetic_scene,
    list_scene_ids,
    load_cloud,
    load_scene,
    load_scenes,
    save_cloud,
    save_scene,
)
from .train import TrainResult, one_cycle_lr, run_training

__all__ = [
    "ConfigError",
    "Detector",
    "FrozenStep",
    "GenerationError",
    "PipelineConfig",
    "Scene",
    "TrainResult",
    "apply_head_variant",
    "desk_config",
    "generate_synthetic_scene",
    "kitti_reference_config",
    "list_scene_ids",
    "load_cloud",
    "load_config",
    "load_scene",
    "load_scenes",
    "metric_value",
    "one_cycle_lr",
    "parse_config",
    "run_evaluation",
    "run_training",
    "save_cloud",
    "save_config",
    "save_scene",
    "serialize_config",
    "validate_config",
]

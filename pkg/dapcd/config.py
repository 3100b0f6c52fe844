"""Configuration helpers for runtime paths and pipeline constants."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from loguru import logger

from .errors import ConfigError
from .utils import read_text

__all__ = [
    "get_data_dir",
    "get_thread_count",
    "get_log_level",
    "PipelineConfig",
    "PROVENANCE",
    "load_pipeline_config",
]


def _default_data_dir() -> Path:
    """Return the default data directory inside the project."""
    return (Path(__file__).resolve().parent.parent / "data").resolve()


def get_data_dir() -> Path:
    """Return the directory where generated artifacts (GT database, reports) live."""
    env_value = os.getenv("PCD_DATA_DIR")
    if env_value:
        return Path(env_value).expanduser().resolve()
    return _default_data_dir()


def get_thread_count(default: int | None = None) -> int:
    """Return the parallelism cap from PCD_THREADS, falling back to the CPU count."""
    fallback = default or os.cpu_count() or 1
    value = os.getenv("PCD_THREADS")
    if value is None:
        return fallback
    try:
        threads = int(value)
    except (TypeError, ValueError):
        logger.warning("Ignoring invalid PCD_THREADS={!r}", value)
        return fallback
    if threads < 1:
        logger.warning("Ignoring non-positive PCD_THREADS={!r}", value)
        return fallback
    return threads


def get_log_level(default: str = "INFO") -> str:
    return os.getenv("PCD_LOG_LEVEL", default).upper()


def _default_ssg_radii() -> dict[str, tuple[float, ...]]:
    return {
        "near": (0.4, 0.8, 1.6, 3.2),
        "mid": (0.8, 1.6, 3.2, 4.0),
        "far": (1.0, 2.0, 3.0, 4.0),
    }


def _default_msg_layer1() -> dict[str, tuple[float, ...]]:
    return {
        "near": (0.1, 0.5),
        "mid": (0.2, 0.6),
        "far": (0.4, 0.8),
    }


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    """Every tunable constant of the pipeline, defaults baked in."""

    # partition
    boundaries: tuple[float, float] = (20.0, 40.0)
    max_range: float = 70.0
    train_overlap: float = 5.0
    inference_overlap: float = 3.0
    range_metric: str = "forward"
    histogram_bin_width: float = 5.0
    # sampling
    total_points: int = 16384
    strategy: str = "4"
    granularity: int = 1024
    proposal_ratios: tuple[float, float, float] = (0.3, 0.5, 0.2)
    grouping: str = "msg"
    num_layers: int = 4
    layer_ratio: int = 4
    samples_per_group: int = 32
    ssg_radii: Mapping[str, tuple[float, ...]] = field(default_factory=_default_ssg_radii)
    msg_base_radii: tuple[tuple[float, ...], ...] = ((0.1, 0.5), (0.5, 1.0), (1.0, 2.0), (2.0, 4.0))
    msg_layer1_radii: Mapping[str, tuple[float, ...]] = field(default_factory=_default_msg_layer1)
    # targets
    search_range: float = 3.0
    bin_size: float = 0.5
    num_angle_bins: int = 12
    refine_search_range: float = 1.5
    refine_bin_size: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    mean_size: tuple[float, float, float] = (3.9, 1.6, 1.56)
    # augmentation
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range: float = math.pi / 4
    gtaug_max_inserts: int = 15
    gtaug_min_points: int = 5
    gtaug_iou_threshold: float = 0.0
    # eval
    iou_threshold: float = 0.7
    nms_threshold: float = 0.8
    ap_mode: str = "R11"
    iou_kind: str = "3d"
    difficulty_min_height: tuple[float, float, float] = (40.0, 25.0, 25.0)
    difficulty_max_occlusion: tuple[int, int, int] = (0, 1, 2)
    difficulty_max_truncation: tuple[float, float, float] = (0.15, 0.30, 0.50)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        overrides = {key: _freeze(value) for key, value in data.items()}
        return cls(**overrides)

    def to_dict(self) -> dict[str, Any]:
        return _thaw(asdict(self))


PROVENANCE: dict[str, str] = {
    "boundaries": "published (0-20 m, 20-40 m, 40-70 m)",
    "max_range": "published",
    "train_overlap": "published (5 m adjacent-region overlap)",
    "inference_overlap": "published (3 m)",
    "range_metric": "convention: LiDAR forward axis",
    "histogram_bin_width": "convention: histogram bin width unpublished",
    "total_points": "published (16,384)",
    "strategy": "published (strategy 4)",
    "granularity": "convention: reproduces 9,216/5,120/2,048",
    "proposal_ratios": "published (0.3/0.5/0.2)",
    "grouping": "published (msg = DA, ssg = sDA)",
    "num_layers": "published (four set-abstraction layers)",
    "layer_ratio": "published (2,304-576-144-36)",
    "samples_per_group": "convention: PointNet++ default",
    "ssg_radii": "published",
    "msg_base_radii": "published (PointRCNN radii)",
    "msg_layer1_radii": "published (adjusted layer-1 radii)",
    "search_range": "convention: PointRCNN RPN bins",
    "bin_size": "convention: PointRCNN RPN bins",
    "num_angle_bins": "convention: PointRCNN RPN bins",
    "refine_search_range": "convention: PointRCNN RCNN bins",
    "refine_bin_size": "convention: PointRCNN RCNN bins",
    "focal_alpha": "convention: focal loss default",
    "focal_gamma": "convention: focal loss default",
    "smooth_l1_beta": "convention",
    "mean_size": "convention: KITTI car prior",
    "flip_prob": "convention",
    "scale_range": "convention",
    "rot_range": "convention",
    "gtaug_max_inserts": "convention: PointRCNN GT-AUG",
    "gtaug_min_points": "convention",
    "gtaug_iou_threshold": "published as non-overlapping, read as BEV IoU > 0 rejection",
    "iou_threshold": "published (IoU 0.7)",
    "nms_threshold": "convention",
    "ap_mode": "convention: R11",
    "iou_kind": "convention: 3D",
    "difficulty_min_height": "convention: KITTI benchmark",
    "difficulty_max_occlusion": "convention: KITTI benchmark",
    "difficulty_max_truncation": "convention: KITTI benchmark",
}


def load_pipeline_config(path: str | os.PathLike[str] | None = None) -> PipelineConfig:
    """Overlay a JSON file on the defaults; no path means pure defaults."""
    if path is None:
        return PipelineConfig()

    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"config file not found: {config_path}")
    try:
        data = json.loads(read_text(config_path))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {config_path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path} must contain a JSON object")

    config = PipelineConfig.from_dict(data)
    logger.debug("Loaded pipeline config from {} ({} overrides)", config_path, len(data))
    return config


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(item) for item in value)
    if isinstance(value, dict):
        return {key: _freeze(item) for key, item in value.items()}
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_thaw(item) for item in value]
    if isinstance(value, Mapping):
        return {key: _thaw(item) for key, item in value.items()}
    return value

"""Density-aware point-cloud pipeline kernels for KITTI-style LiDAR detection."""

from importlib import import_module
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - import for type checkers only
	from . import augmentation, eval, geometry, partition, sampling, targets

__version__ = "0.1.0"

_LAZY = {
	"augmentation",
	"bench",
	"cli",
	"db",
	"eval",
	"geometry",
	"kitti_io",
	"partition",
	"sampling",
	"synthetic",
	"targets",
}


def __getattr__(name: str):  # pragma: no cover - simple lazy import shim
	if name in _LAZY:
		module = import_module(f".{name}", __name__)
		globals()[name] = module
		return module
	raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

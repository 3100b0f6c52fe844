"""Immutable domain records shared across modules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "normalize_angle",
    "PointCloud",
    "OrientedBox3D",
    "GroundTruth",
    "Detection",
]


def normalize_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, slots=True)
class PointCloud:
    """N points as an (N, 4) array of x, y, z (meters) and reflectance."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self) -> None:
        points = np.asarray(self.points)
        if points.size == 0:
            points = np.zeros((0, 4), dtype=points.dtype if points.dtype.kind == "f" else np.float32)
        if points.ndim != 2 or points.shape[1] != 4:
            raise ValidationError(f"point array must have shape (N, 4), got {points.shape}")
        if points.dtype.kind != "f":
            points = points.astype(np.float64)
        if not np.isfinite(points).all():
            raise ValidationError("point coordinates must be finite")
        reflectance = points[:, 3]
        if ((reflectance < 0.0) | (reflectance > 1.0)).any():
            raise ValidationError("reflectance must lie in [0, 1]")
        if points.flags.writeable:
            points = _readonly(points.copy())
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=np.intp)], self.frame_id)

    @classmethod
    def from_xyz(cls, xyz: np.ndarray, reflectance: np.ndarray | float = 0.0, frame_id: str = "") -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        refl = np.broadcast_to(np.asarray(reflectance, dtype=np.float64), (xyz.shape[0],))
        return cls(np.column_stack([xyz, refl]), frame_id)


@dataclass(frozen=True, slots=True)
class OrientedBox3D:
    """Upright box: centroid (x, y, z), size (l, w, h), yaw about +z from +x."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValidationError("box center and size need three components")
        if not all(math.isfinite(v) for v in (*center, *size, float(self.yaw))):
            raise ValidationError("box parameters must be finite")
        if min(size) <= 0.0:
            raise ValidationError(f"box sizes must be strictly positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    def as_row(self) -> tuple[float, ...]:
        return (*self.center, *self.size, self.yaw)

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "OrientedBox3D":
        if len(row) != 7:
            raise ValidationError(f"box row needs 7 values, got {len(row)}")
        return cls(
            center=(row[0], row[1], row[2]),
            size=(row[3], row[4], row[5]),
            yaw=row[6],
        )


@dataclass(frozen=True, slots=True)
class GroundTruth:
    """One KITTI label row with its box expressed in the LiDAR frame."""

    box: OrientedBox3D | None
    class_label: str
    truncation: float = 0.0
    occlusion: int = 0
    bbox2d: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    alpha: float = 0.0
    dont_care: bool = False
    frame_id: str = ""

    def __post_init__(self) -> None:
        left, top, right, bottom = (float(v) for v in self.bbox2d)
        object.__setattr__(self, "bbox2d", (left, top, right, bottom))
        if self.dont_care:
            return
        if self.box is None:
            raise ValidationError("only DontCare records may omit the box")
        if not (right > left and bottom > top):
            raise ValidationError(f"degenerate 2D box {self.bbox2d}")
        if self.occlusion not in (0, 1, 2, 3):
            raise ValidationError(f"occlusion level must be 0-3, got {self.occlusion}")
        if not 0.0 <= self.truncation <= 1.0:
            raise ValidationError(f"truncation must lie in [0, 1], got {self.truncation}")

    @property
    def height_px(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]


@dataclass(frozen=True, slots=True)
class Detection:
    box: OrientedBox3D
    score: float
    frame_id: str = ""

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValidationError("detection score must be finite")

    @classmethod
    def from_row(cls, row: Sequence[float], frame_id: str = "") -> "Detection":
        if len(row) != 8:
            raise ValidationError(f"detection row needs score + 7 box values, got {len(row)}")
        return cls(box=OrientedBox3D.from_row(row[1:]), score=float(row[0]), frame_id=frame_id)

    def as_row(self) -> tuple[float, ...]:
        return (self.score, *self.box.as_row())



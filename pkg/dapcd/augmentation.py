"""Scene augmentation: flip, scaling, rotation and ground-truth insertion (GT-AUG)."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

import numpy as np
from loguru import logger

from .errors import ValidationError
from .geometry import bev_iou, points_in_box, rotate_box_z, rotation_z
from .records import GroundTruth, OrientedBox3D, PointCloud, normalize_angle
from .utils import SeedLike, make_rng

__all__ = [
    "AugmentConfig",
    "AppliedOps",
    "AugmentResult",
    "flip_scene",
    "scale_scene",
    "rotate_scene",
    "augment_scene",
    "GtEntry",
    "GtDatabase",
    "build_gt_database",
    "GtAugResult",
    "gt_aug_insert",
]

Scene = tuple[PointCloud, list[GroundTruth]]


@dataclass(frozen=True, slots=True)
class AugmentConfig:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range: float = math.pi / 4
    gtaug_max_inserts: int = 15
    gtaug_min_points: int = 5
    gtaug_iou_threshold: float = 0.0
    gtaug_class: str = "Car"

    def __post_init__(self) -> None:
        lo, hi = (float(v) for v in self.scale_range)
        object.__setattr__(self, "scale_range", (lo, hi))
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 < lo <= hi:
            raise ValidationError(f"scale range needs 0 < lo <= hi, got {self.scale_range}")
        if self.rot_range < 0:
            raise ValidationError(f"rot_range must be >= 0, got {self.rot_range}")
        if self.gtaug_max_inserts < 0 or self.gtaug_min_points < 1:
            raise ValidationError("GT-AUG needs max_inserts >= 0 and min_points >= 1")

    @classmethod
    def from_pipeline(cls, config) -> "AugmentConfig":
        return cls(
            flip_prob=config.flip_prob,
            scale_range=tuple(config.scale_range),
            rot_range=config.rot_range,
            gtaug_max_inserts=config.gtaug_max_inserts,
            gtaug_min_points=config.gtaug_min_points,
            gtaug_iou_threshold=config.gtaug_iou_threshold,
        )


@dataclass(frozen=True, slots=True)
class AppliedOps:
    flip: bool
    scale: float
    rotation: float

    def as_dict(self) -> dict[str, object]:
        return {"flip": self.flip, "scale": self.scale, "rotation": self.rotation}


@dataclass(frozen=True, slots=True)
class AugmentResult:
    cloud: PointCloud
    gts: list[GroundTruth]
    ops: AppliedOps


def _with_xyz(cloud: PointCloud, xyz: np.ndarray) -> PointCloud:
    points = np.column_stack([xyz, cloud.reflectance.astype(np.float64)])
    return PointCloud(points, cloud.frame_id)


def _map_boxes(gts: Iterable[GroundTruth], fn) -> list[GroundTruth]:
    return [gt if gt.box is None else replace(gt, box=fn(gt.box)) for gt in gts]


def flip_scene(cloud: PointCloud, gts: Sequence[GroundTruth]) -> Scene:
    """Mirror across the forward (x-z) plane."""
    xyz = cloud.xyz.astype(np.float64)
    xyz[:, 1] = -xyz[:, 1]

    def mirror(box: OrientedBox3D) -> OrientedBox3D:
        x, y, z = box.center
        return OrientedBox3D((x, -y, z), box.size, -box.yaw)

    return _with_xyz(cloud, xyz), _map_boxes(gts, mirror)


def scale_scene(cloud: PointCloud, gts: Sequence[GroundTruth], scale: float) -> Scene:
    """Similarity scaling of points, box centers and box sizes."""
    if scale <= 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    xyz = cloud.xyz.astype(np.float64) * scale

    def grow(box: OrientedBox3D) -> OrientedBox3D:
        return OrientedBox3D(
            tuple(c * scale for c in box.center),
            tuple(s * scale for s in box.size),
            box.yaw,
        )

    return _with_xyz(cloud, xyz), _map_boxes(gts, grow)


def rotate_scene(cloud: PointCloud, gts: Sequence[GroundTruth], angle: float) -> Scene:
    """Rotate points and boxes about the sensor z axis."""
    xyz = cloud.xyz.astype(np.float64) @ rotation_z(angle).T
    return _with_xyz(cloud, xyz), _map_boxes(gts, lambda box: rotate_box_z(box, angle))


def augment_scene(
    cloud: PointCloud,
    gts: Sequence[GroundTruth],
    config: AugmentConfig | None = None,
    seed: SeedLike = None,
) -> AugmentResult:
    """Random flip, then scale, then rotation; the sampled parameters are returned."""
    config = config or AugmentConfig()
    rng = make_rng(seed)
    flip = bool(rng.random() < config.flip_prob)
    scale = float(rng.uniform(*config.scale_range))
    rotation = float(rng.uniform(-config.rot_range, config.rot_range))

    scene: Scene = (cloud, list(gts))
    if flip:
        scene = flip_scene(*scene)
    scene = scale_scene(*scene, scale)
    scene = rotate_scene(*scene, rotation)

    ops = AppliedOps(flip=flip, scale=scale, rotation=normalize_angle(rotation))
    logger.debug("Augmented {!r}: {}", cloud.frame_id, ops.as_dict())
    return AugmentResult(scene[0], scene[1], ops)


# ----------------------------------------------------------------------
# Ground-truth database
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class GtEntry:
    """One object cut out of its source scene, stored at its original pose."""

    gt: GroundTruth
    points: PointCloud

    def __post_init__(self) -> None:
        if self.gt.box is None or self.gt.dont_care:
            raise ValidationError("database entries need a labelled box")

    @property
    def box(self) -> OrientedBox3D:
        return self.gt.box

    @property
    def source_frame(self) -> str:
        return self.gt.frame_id


@dataclass(frozen=True, slots=True)
class GtDatabase:
    entries: tuple[GtEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[GtEntry]:
        return iter(self.entries)

    def of_class(self, class_label: str) -> "GtDatabase":
        return GtDatabase(tuple(e for e in self.entries if e.gt.class_label == class_label))


def build_gt_database(
    scenes: Iterable[Scene],
    min_points: int = 5,
    class_label: str = "Car",
) -> GtDatabase:
    """Crop every labelled object of `class_label` with at least `min_points` interior points."""
    entries: list[GtEntry] = []
    skipped = 0
    for cloud, gts in scenes:
        for gt in gts:
            if gt.dont_care or gt.box is None or gt.class_label != class_label:
                continue
            inside = points_in_box(cloud, gt.box)
            if inside.size < min_points:
                skipped += 1
                continue
            frame = gt.frame_id or cloud.frame_id
            entries.append(GtEntry(replace(gt, frame_id=frame), cloud.subset(inside)))
    logger.info("GT database: {} entries, {} objects below {} points", len(entries), skipped, min_points)
    return GtDatabase(tuple(entries))


@dataclass(frozen=True, slots=True)
class GtAugResult:
    cloud: PointCloud
    gts: list[GroundTruth]
    inserted: int
    removed_points: int


def gt_aug_insert(
    cloud: PointCloud,
    gts: Sequence[GroundTruth],
    db: GtDatabase,
    config: AugmentConfig | None = None,
    seed: SeedLike = None,
) -> GtAugResult:
    """Paste database objects from other scenes that do not overlap any box already present."""
    config = config or AugmentConfig()
    pool = [e for e in db.of_class(config.gtaug_class) if e.source_frame != cloud.frame_id]
    if not pool or config.gtaug_max_inserts == 0:
        return GtAugResult(cloud, list(gts), 0, 0)

    rng = make_rng(seed)
    picks = rng.choice(len(pool), size=min(config.gtaug_max_inserts, len(pool)), replace=False)

    occupied = [gt.box for gt in gts if gt.box is not None and not gt.dont_care]
    accepted: list[GtEntry] = []
    for index in picks:
        entry = pool[int(index)]
        if any(bev_iou(entry.box, box) > config.gtaug_iou_threshold for box in occupied):
            logger.debug("GT-AUG rejected entry from {!r}: overlaps an existing box", entry.source_frame)
            continue
        accepted.append(entry)
        occupied.append(entry.box)

    if not accepted:
        return GtAugResult(cloud, list(gts), 0, 0)

    keep = np.ones(len(cloud), dtype=bool)
    for entry in accepted:
        keep[points_in_box(cloud, entry.box)] = False
    removed = int((~keep).sum())

    dtype = np.result_type(cloud.points.dtype, *(e.points.points.dtype for e in accepted))
    points = np.concatenate(
        [cloud.points[keep].astype(dtype)] + [e.points.points.astype(dtype) for e in accepted]
    )
    new_gts = list(gts) + [replace(e.gt, frame_id=cloud.frame_id) for e in accepted]
    logger.debug("GT-AUG inserted {} objects, removed {} occluded points", len(accepted), removed)
    return GtAugResult(PointCloud(points, cloud.frame_id), new_gts, len(accepted), removed)

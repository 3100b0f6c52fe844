"""Synthetic KITTI-like scenes with a range-decaying density profile."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger

from .dataset import frame_paths
from .errors import PlacementError, ValidationError
from .geometry import bev_iou, points_in_box, rotation_z
from .kitti_io import Calibration, canonical_calibration, write_calibration, write_labels, write_velodyne
from .records import GroundTruth, OrientedBox3D, PointCloud, normalize_angle
from .utils import SeedLike, make_rng

__all__ = [
    "DEFAULT_DENSITY_PROFILE",
    "IMAGE_SIZE",
    "SyntheticSceneSpec",
    "car_point_count",
    "generate_scene",
    "write_scene",
    "generate_dataset",
]

# mean background points per 5 m bin out to 70 m (sums: near 13.8k, mid 3.6k, far 1.0k)
DEFAULT_DENSITY_PROFILE = (
    5000.0, 4000.0, 2900.0, 1900.0,
    1300.0, 1000.0, 750.0, 550.0,
    300.0, 220.0, 170.0, 130.0, 100.0, 80.0,
)
IMAGE_SIZE = (1242, 375)
_MAX_TRIES = 1000
_SURFACE_SHRINK = 0.98
_GROUND_Z = -1.73


@dataclass(frozen=True, slots=True)
class SyntheticSceneSpec:
    density_profile: tuple[float, ...] = DEFAULT_DENSITY_PROFILE
    bin_width: float = 5.0
    n_cars: tuple[int, int, int] = (3, 2, 1)
    boundaries: tuple[float, float] = (20.0, 40.0)
    max_range: float = 70.0
    lateral_extent: float = 30.0
    density_jitter: float = 0.1
    car_size: tuple[float, float, float] = (3.9, 1.6, 1.56)

    def __post_init__(self) -> None:
        object.__setattr__(self, "density_profile", tuple(float(v) for v in self.density_profile))
        object.__setattr__(self, "n_cars", tuple(int(v) for v in self.n_cars))
        if any(v < 0 for v in self.density_profile) or any(v < 0 for v in self.n_cars):
            raise ValidationError("density profile and car counts must be nonnegative")
        if len(self.n_cars) != 3:
            raise ValidationError("n_cars needs one count per region")
        if self.bin_width <= 0 or self.density_jitter < 0:
            raise ValidationError("bin width must be positive and jitter nonnegative")


def car_point_count(distance: float) -> int:
    """Returns on a car fall off with the square of range."""
    return int(min(4000, max(3, round(200000.0 / max(distance, 1.0) ** 2))))


def _background(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    factor = max(0.1, rng.normal(1.0, spec.density_jitter)) if spec.density_jitter else 1.0
    chunks = []
    for k, mean in enumerate(spec.density_profile):
        lo = k * spec.bin_width
        hi = min((k + 1) * spec.bin_width, spec.max_range)
        if lo >= spec.max_range:
            break
        n = int(rng.poisson(mean * factor))
        x = rng.uniform(lo, hi, n)
        y = rng.uniform(-spec.lateral_extent, spec.lateral_extent, n)
        z = rng.uniform(_GROUND_Z, 0.5, n)
        chunks.append(np.column_stack([x, y, z, rng.uniform(0.0, 1.0, n)]))
    if not chunks:
        return np.zeros((0, 4))
    return np.concatenate(chunks)


def _place_car(
    lo: float,
    hi: float,
    spec: SyntheticSceneSpec,
    placed: list[OrientedBox3D],
    rng: np.random.Generator,
) -> OrientedBox3D:
    for _ in range(_MAX_TRIES):
        x = rng.uniform(lo + 2.0, hi - 2.0)
        half_width = min(spec.lateral_extent - 2.0, 0.5 * x)
        y = rng.uniform(-half_width, half_width)
        size = tuple(s * rng.uniform(0.95, 1.05) for s in spec.car_size)
        box = OrientedBox3D((x, y, _GROUND_Z + size[2] / 2.0), size, rng.uniform(-math.pi, math.pi))
        if all(bev_iou(box, other) == 0.0 for other in placed):
            return box
    raise PlacementError(f"could not place a car in [{lo}, {hi}] m after {_MAX_TRIES} tries")


def _surface_points(box: OrientedBox3D, n: int, rng: np.random.Generator) -> np.ndarray:
    half = np.asarray(box.size) / 2.0 * _SURFACE_SHRINK
    l, w, h = half
    # face areas for axis pairs (y,z), (x,z), (x,y), each twice
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, (n, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    local[np.arange(n), axis] = sign * half[axis]
    xyz = local @ rotation_z(box.yaw).T + np.asarray(box.center)
    return np.column_stack([xyz, rng.uniform(0.0, 1.0, n)])


def _label_for(box: OrientedBox3D, calib: Calibration, occlusion: int, frame_id: str) -> GroundTruth:
    full = calib.project_box(box)
    width, height = IMAGE_SIZE
    left, top = max(0.0, full[0]), max(0.0, full[1])
    right, bottom = min(float(width), full[2]), min(float(height), full[3])
    if right <= left or bottom <= top:
        left, top, right, bottom = 0.0, 0.0, 1.0, 1.0
        truncation = 1.0
    else:
        area = (full[2] - full[0]) * (full[3] - full[1])
        truncation = float(np.clip(1.0 - (right - left) * (bottom - top) / area, 0.0, 1.0))
    center_cam = calib.velo_to_cam(box.center)[0]
    ry = normalize_angle(-box.yaw - math.pi / 2.0)
    alpha = normalize_angle(ry - math.atan2(center_cam[0], center_cam[2]))
    return GroundTruth(
        box=box,
        class_label="Car",
        truncation=round(truncation, 2),
        occlusion=occlusion,
        bbox2d=(left, top, right, bottom),
        alpha=alpha,
        frame_id=frame_id,
    )


def generate_scene(
    spec: SyntheticSceneSpec | None = None,
    seed: SeedLike = None,
    frame_id: str = "000000",
    calib: Calibration | None = None,
) -> tuple[PointCloud, list[GroundTruth]]:
    """Background plus non-overlapping cars; deterministic per seed."""
    spec = spec or SyntheticSceneSpec()
    calib = calib or canonical_calibration()
    rng = make_rng(seed)
    b1, b2 = spec.boundaries
    regions = ((0.0, b1), (b1, b2), (b2, spec.max_range))

    boxes: list[OrientedBox3D] = []
    occlusions: list[int] = []
    for level, ((lo, hi), count) in enumerate(zip(regions, spec.n_cars)):
        for _ in range(count):
            boxes.append(_place_car(max(lo, 3.0), hi, spec, boxes, rng))
            occlusions.append(level)

    background = _background(spec, rng)
    cars = [_surface_points(box, car_point_count(box.center[0]), rng) for box in boxes]
    # float32 like a velodyne scan, so containment is decided on stored values
    background = background.astype(np.float32)
    if boxes:
        keep = np.ones(len(background), dtype=bool)
        for box in boxes:
            keep[points_in_box(background, box)] = False
        background = background[keep]
    points = np.concatenate([background] + [c.astype(np.float32) for c in cars])
    points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)

    gts = [_label_for(box, calib, occ, frame_id) for box, occ in zip(boxes, occlusions)]
    logger.debug("Synthetic scene {}: {} points, {} cars", frame_id, len(points), len(gts))
    return PointCloud(points, frame_id), gts


def write_scene(
    root: str | os.PathLike[str],
    cloud: PointCloud,
    gts: list[GroundTruth],
    calib: Calibration | None = None,
) -> dict[str, Path]:
    """Write velodyne/, label_2/ and calib/ files for one frame."""
    calib = calib or canonical_calibration()
    paths = frame_paths(root, cloud.frame_id)
    write_velodyne(paths["velodyne"], cloud)
    write_labels(paths["label"], gts, calib)
    write_calibration(paths["calib"], calib)
    return paths


def generate_dataset(
    root: str | os.PathLike[str],
    n_scenes: int,
    spec: SyntheticSceneSpec | None = None,
    seed: int | None = None,
) -> list[str]:
    """Write n_scenes frames with independent child seeds; returns the frame ids."""
    if n_scenes < 1:
        raise ValidationError(f"need at least one scene, got {n_scenes}")
    frames = []
    for number, child in enumerate(np.random.SeedSequence(seed).spawn(n_scenes)):
        frame_id = f"{number:06d}"
        cloud, gts = generate_scene(spec, child, frame_id)
        write_scene(root, cloud, gts)
        frames.append(frame_id)
    logger.info("Wrote {} synthetic scenes to {}", n_scenes, root)
    return frames

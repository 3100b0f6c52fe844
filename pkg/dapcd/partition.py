"""Near/mid/far range partitioning and per-region density statistics."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from loguru import logger

from .errors import InsufficientDataError, MalformedFileError, MissingFieldError, PcdError, ValidationError
from .records import PointCloud
from .utils import read_text

__all__ = [
    "REGIONS",
    "RANGE_METRICS",
    "RegionSpec",
    "RegionPartition",
    "DensityStats",
    "KITTI_DENSITY_STATS",
    "load_density_stats",
    "RangeHistogram",
    "point_ranges",
    "partition_points",
    "compute_density_stats",
    "histogram_by_range",
]

REGIONS = ("near", "mid", "far")
RANGE_METRICS = ("forward", "euclidean")


@dataclass(frozen=True, slots=True)
class RegionSpec:
    boundaries: tuple[float, float] = (20.0, 40.0)
    max_range: float = 70.0
    overlap: float = 0.0
    metric: str = "forward"

    def __post_init__(self) -> None:
        b1, b2 = (float(v) for v in self.boundaries)
        object.__setattr__(self, "boundaries", (b1, b2))
        if not 0.0 < b1 < b2 < self.max_range:
            raise ValidationError(f"need 0 < b1 < b2 < max_range, got {b1}, {b2}, {self.max_range}")
        if not 0.0 <= self.overlap < b2 - b1:
            raise ValidationError(f"overlap must lie in [0, {b2 - b1}), got {self.overlap}")
        if self.metric not in RANGE_METRICS:
            raise ValidationError(f"unknown range metric {self.metric!r}")

    @classmethod
    def training(cls, **kwargs) -> "RegionSpec":
        return cls(overlap=5.0, **kwargs)

    @classmethod
    def inference(cls, **kwargs) -> "RegionSpec":
        return cls(overlap=3.0, **kwargs)

    def with_overlap(self, overlap: float) -> "RegionSpec":
        return RegionSpec(self.boundaries, self.max_range, overlap, self.metric)

    def region_bounds(self) -> dict[str, tuple[float, float]]:
        """Closed-open extent of every region; far includes max_range."""
        b1, b2 = self.boundaries
        return {
            "near": (0.0, b1 + self.overlap),
            "mid": (b1, b2 + self.overlap),
            "far": (b2, self.max_range),
        }


@dataclass(frozen=True, slots=True)
class RegionPartition:
    near: np.ndarray
    mid: np.ndarray
    far: np.ndarray
    spec: RegionSpec

    def region(self, name: str) -> np.ndarray:
        if name not in REGIONS:
            raise ValidationError(f"unknown region {name!r}")
        return getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {name: int(self.region(name).size) for name in REGIONS}

    def overlap_indices(self) -> dict[str, np.ndarray]:
        """Points shared by adjacent regions."""
        return {
            "near_mid": np.intersect1d(self.near, self.mid, assume_unique=True),
            "mid_far": np.intersect1d(self.mid, self.far, assume_unique=True),
        }


@dataclass(frozen=True, slots=True)
class DensityStats:
    m: tuple[float, float, float]
    sigma: tuple[float, float, float]
    n_scenes: int

    def __post_init__(self) -> None:
        m = tuple(float(v) for v in self.m)
        sigma = tuple(float(v) for v in self.sigma)
        if len(m) != 3 or len(sigma) != 3:
            raise ValidationError("density stats need three regions")
        if min(m) < 0 or min(sigma) < 0:
            raise ValidationError("density stats must be nonnegative")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "sigma", sigma)

    def as_dict(self) -> dict[str, object]:
        return {"m": list(self.m), "sigma": list(self.sigma), "n_scenes": self.n_scenes}

    @classmethod
    def from_dict(cls, data: dict) -> "DensityStats":
        return cls(tuple(data["m"]), tuple(data["sigma"]), int(data.get("n_scenes", 0)))


# KITTI train split (3,712 scans), 0-20 / 20-40 / 40-70 m
KITTI_DENSITY_STATS = DensityStats(m=(13800.0, 3600.0, 1000.0), sigma=(1800.0, 1100.0, 500.0), n_scenes=3712)


def load_density_stats(path: str | os.PathLike[str]) -> DensityStats:
    """Stats JSON as printed by `dapcd stats`, or a bare {m, sigma, n_scenes} object."""
    stats_path = Path(path)
    try:
        data = json.loads(read_text(stats_path))
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{stats_path}: {exc}") from exc
    if isinstance(data, dict):
        data = data.get("density_stats", data)
    if not isinstance(data, dict):
        raise MalformedFileError(f"{stats_path} must contain a JSON object")
    for key in ("m", "sigma"):
        if key not in data:
            raise MissingFieldError(key, str(stats_path))
    try:
        return DensityStats.from_dict(data)
    except PcdError:
        raise
    except (TypeError, ValueError) as exc:
        raise MalformedFileError(f"{stats_path}: {exc}") from exc


def point_ranges(cloud: PointCloud | np.ndarray, metric: str = "forward") -> np.ndarray:
    """Per-point range; NaN marks points behind the sensor (x < 0)."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)[:, :3]
    x = xyz[:, 0].astype(np.float64)
    if metric == "forward":
        ranges = x.copy()
    elif metric == "euclidean":
        ranges = np.hypot(x, xyz[:, 1].astype(np.float64))
    else:
        raise ValidationError(f"unknown range metric {metric!r}")
    ranges[x < 0.0] = np.nan
    return ranges


def partition_points(cloud: PointCloud, spec: RegionSpec) -> RegionPartition:
    r = point_ranges(cloud, spec.metric)
    b1, b2 = spec.boundaries
    with np.errstate(invalid="ignore"):
        valid = (r >= 0.0) & (r <= spec.max_range)
        near = valid & (r < b1 + spec.overlap)
        mid = valid & (r >= b1) & (r < b2 + spec.overlap)
        far = valid & (r >= b2)
    return RegionPartition(
        near=np.flatnonzero(near),
        mid=np.flatnonzero(mid),
        far=np.flatnonzero(far),
        spec=spec,
    )


def _population_stats(values: Sequence[int]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    variance = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(variance)


def compute_density_stats(clouds: Iterable[PointCloud], spec: RegionSpec | None = None) -> DensityStats:
    """Mean and population std of per-region point counts over a split."""
    spec = spec or RegionSpec()
    if spec.overlap != 0.0:
        logger.warning("Density stats use disjoint regions; ignoring overlap {}", spec.overlap)
        spec = spec.with_overlap(0.0)

    counts: dict[str, list[int]] = {name: [] for name in REGIONS}
    for cloud in clouds:
        for name, count in partition_points(cloud, spec).counts().items():
            counts[name].append(count)

    n_scenes = len(counts["near"])
    if n_scenes < 2:
        raise InsufficientDataError(f"density stats need at least 2 scenes, got {n_scenes}")

    stats = [_population_stats(counts[name]) for name in REGIONS]
    result = DensityStats(
        m=tuple(mean for mean, _ in stats),
        sigma=tuple(std for _, std in stats),
        n_scenes=n_scenes,
    )
    logger.info("Density stats over {} scenes: m={} sigma={}", n_scenes, result.m, result.sigma)
    return result


@dataclass(frozen=True, slots=True)
class RangeHistogram:
    bin_width: float
    bin_starts: tuple[float, ...]
    mean_counts: tuple[float, ...]
    n_scenes: int

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.bin_starts, self.mean_counts))


def histogram_by_range(
    clouds: Iterable[PointCloud],
    bin_width: float = 5.0,
    max_range: float = 70.0,
    metric: str = "forward",
) -> RangeHistogram:
    """Mean points per scene in each [k*w, (k+1)*w) range bin up to max_range."""
    if bin_width <= 0:
        raise ValidationError(f"bin width must be positive, got {bin_width}")
    n_bins = max(1, math.ceil(max_range / bin_width))
    totals = np.zeros(n_bins, dtype=np.int64)
    n_scenes = 0
    for cloud in clouds:
        r = point_ranges(cloud, metric)
        with np.errstate(invalid="ignore"):
            r = r[(r >= 0.0) & (r <= max_range)]
        # r == max_range lands in the last bin
        bins = np.minimum(np.floor(r / bin_width).astype(np.int64), n_bins - 1)
        totals += np.bincount(bins, minlength=n_bins)
        n_scenes += 1

    means = totals / n_scenes if n_scenes else np.zeros(n_bins)
    return RangeHistogram(
        bin_width=float(bin_width),
        bin_starts=tuple(float(k * bin_width) for k in range(n_bins)),
        mean_counts=tuple(float(v) for v in means),
        n_scenes=n_scenes,
    )

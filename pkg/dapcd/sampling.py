"""Per-region sampling budgets, FPS, ball query and the three-branch layered pipeline."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from .config import PipelineConfig, get_thread_count
from .errors import InfeasibleStrategyError, ValidationError
from .partition import REGIONS, DensityStats, RegionPartition
from .records import PointCloud
from .utils import SeedLike, make_rng

__all__ = [
    "PAD_INDEX",
    "SamplingBudget",
    "StrategySpec",
    "STRATEGIES",
    "get_strategy",
    "allocate_budget",
    "sample_region",
    "farthest_point_sampling",
    "ball_query",
    "BranchSchedule",
    "derive_group_sizes",
    "default_schedules",
    "ProposalRatios",
    "allocate_proposals",
    "LayerGroups",
    "BranchResult",
    "BranchPipeline",
    "build_branch_pipeline",
]

# sentinel for padded slots of an empty region
PAD_INDEX = -1


# ----------------------------------------------------------------------
# Budgets
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class SamplingBudget:
    total: int
    near: int
    mid: int
    far: int

    def __post_init__(self) -> None:
        if min(self.near, self.mid, self.far) <= 0:
            raise ValidationError(f"region budgets must be positive, got {self.as_tuple()}")
        if self.near + self.mid + self.far != self.total:
            raise ValidationError(f"region budgets {self.as_tuple()} do not sum to {self.total}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.near, self.mid, self.far)

    def region(self, name: str) -> int:
        if name not in REGIONS:
            raise ValidationError(f"unknown region {name!r}")
        return getattr(self, name)

    def as_dict(self) -> dict[str, int]:
        return {"total": self.total, "near": self.near, "mid": self.mid, "far": self.far}


@dataclass(frozen=True, slots=True)
class StrategySpec:
    """mid = m2 + k_mid*sigma2, far = m3 + k_far*sigma3, near takes the rest."""

    k_mid: float
    k_far: float
    granularity: int = 1024
    proportional: bool = False
    name: str = ""

    def __post_init__(self) -> None:
        if self.k_mid < 0 or self.k_far < 0:
            raise ValidationError(f"strategy multipliers must be >= 0, got {self.k_mid}, {self.k_far}")
        if self.granularity < 1:
            raise ValidationError(f"granularity must be >= 1, got {self.granularity}")


STRATEGIES: dict[str, StrategySpec] = {
    "natural": StrategySpec(0.0, 0.0, proportional=True, name="natural"),
    "original": StrategySpec(0.0, 0.0, name="original"),
    "1": StrategySpec(1.0, 1.0, name="1"),
    "2": StrategySpec(1.5, 1.5, name="2"),
    "3": StrategySpec(2.0, 2.0, name="3"),
    "4": StrategySpec(1.5, 2.0, name="4"),
}


def get_strategy(name: str, granularity: int = 1024) -> StrategySpec:
    try:
        preset = STRATEGIES[str(name)]
    except KeyError:
        raise ValidationError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}") from None
    return StrategySpec(preset.k_mid, preset.k_far, granularity, preset.proportional, preset.name)


def _round_nearest(raw: float, granularity: int) -> int:
    # half-up to the nearest multiple, never below one granule
    return max(granularity, int(math.floor(raw / granularity + 0.5)) * granularity)


def _round_up(raw: float, granularity: int) -> int:
    return max(granularity, int(math.ceil(raw / granularity)) * granularity)


def allocate_budget(stats: DensityStats, strategy: StrategySpec, total: int = 16384) -> SamplingBudget:
    g = strategy.granularity
    if total < 3 * g:
        raise ValidationError(f"total {total} is below three granules of {g}")

    _, m2, m3 = stats.m
    _, s2, s3 = stats.sigma
    if strategy.proportional:
        mass = math.fsum(stats.m)
        if mass <= 0:
            raise InfeasibleStrategyError("proportional split needs nonzero mean counts")
        # farther points matter more: round the small regions up
        far = _round_up(m3 / mass * total, g)
        mid = _round_up(m2 / mass * total, g)
    else:
        far = _round_nearest(m3 + strategy.k_far * s3, g)
        mid = _round_nearest(m2 + strategy.k_mid * s2, g)

    near = total - mid - far
    if near <= 0:
        raise InfeasibleStrategyError(f"strategy {strategy.name or '?'} exhausts the budget: mid={mid} far={far}")
    if near <= mid or near <= far:
        raise InfeasibleStrategyError(f"near budget {near} is not the largest (mid={mid}, far={far})")

    budget = SamplingBudget(total=total, near=near, mid=mid, far=far)
    logger.debug("Strategy {} budget {}", strategy.name or "custom", budget.as_tuple())
    return budget


# ----------------------------------------------------------------------
# Point selection kernels
# ----------------------------------------------------------------------
def sample_region(points: Sequence[int] | np.ndarray, budget: int, seed: SeedLike = None) -> np.ndarray:
    """Draw exactly `budget` indices from a region, repeating points when it is short.

    An empty region yields `budget` copies of PAD_INDEX.
    """
    if budget <= 0:
        raise ValidationError(f"budget must be positive, got {budget}")
    indices = np.asarray(points, dtype=np.intp)
    rng = make_rng(seed)
    n = indices.size
    if n == 0:
        return np.full(budget, PAD_INDEX, dtype=np.intp)
    if n >= budget:
        return rng.choice(indices, size=budget, replace=False)
    extra = rng.choice(indices, size=budget - n, replace=True)
    return rng.permutation(np.concatenate([indices, extra]))


def _as_xyz(points: PointCloud | np.ndarray) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz.astype(np.float64)
    array = np.asarray(points, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] < 3:
        raise ValidationError(f"expected an (N, 3) coordinate array, got {array.shape}")
    return array[:, :3]


def farthest_point_sampling(
    points: PointCloud | np.ndarray,
    k: int,
    seed: SeedLike = None,
    start: int | None = None,
) -> np.ndarray:
    """Greedy max-min selection of k indices, ties to the lowest index.

    The first index is `start` when given, a seeded draw when `seed` is given,
    and otherwise the point nearest the centroid. When k exceeds the point
    count the full selection is tiled.
    """
    xyz = _as_xyz(points)
    n = xyz.shape[0]
    if n == 0:
        raise ValidationError("farthest point sampling needs at least one point")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")

    if start is None:
        if seed is None:
            start = int(np.argmin(((xyz - xyz.mean(axis=0)) ** 2).sum(axis=1)))
        else:
            start = int(make_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise ValidationError(f"start index {start} out of range for {n} points")

    m = min(k, n)
    selected = np.empty(m, dtype=np.intp)
    selected[0] = start
    # per-axis columns; dist and term are reused every iteration
    columns = [np.ascontiguousarray(xyz[:, axis]) for axis in range(3)]
    dist, term = np.empty(n), np.empty(n)
    min_d = np.full(n, np.inf)
    nxt = start
    for i in range(m):
        if i:
            nxt = int(np.argmax(min_d))
            selected[i] = nxt
        np.subtract(columns[0], columns[0][nxt], out=dist)
        np.multiply(dist, dist, out=dist)
        for column in columns[1:]:
            np.subtract(column, column[nxt], out=term)
            np.multiply(term, term, out=term)
            dist += term
        np.minimum(min_d, dist, out=min_d)
        min_d[nxt] = -1.0

    if k > n:
        return np.resize(selected, k)
    return selected


def ball_query(
    centroids: np.ndarray,
    cloud: PointCloud | np.ndarray,
    radius: float,
    max_samples: int,
    chunk_size: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Group up to max_samples in-radius cloud indices per centroid, ascending.

    Returns (groups (M, max_samples), counts (M,)). Short groups are padded
    with their first index; a centroid with no neighbour gets its nearest
    point repeated and a count of 0.
    """
    if radius <= 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    if max_samples < 1:
        raise ValidationError(f"max_samples must be >= 1, got {max_samples}")
    centers = _as_xyz(np.atleast_2d(centroids))
    xyz = _as_xyz(cloud)
    if xyz.shape[0] == 0:
        raise ValidationError("ball query needs a nonempty cloud")

    m = centers.shape[0]
    groups = np.empty((m, max_samples), dtype=np.intp)
    counts = np.empty(m, dtype=np.intp)
    tree = cKDTree(xyz)
    step = chunk_size or 4096

    for lo in range(0, m, step):
        hits = tree.query_ball_point(centers[lo:lo + step], radius, return_sorted=True)
        for row, found in enumerate(hits, start=lo):
            found = found[:max_samples]
            counts[row] = len(found)
            if found:
                groups[row] = found[0]
                groups[row, :len(found)] = found
            else:
                groups[row] = int(np.argmin(((xyz - centers[row]) ** 2).sum(axis=1)))

    return groups, counts


# ----------------------------------------------------------------------
# Schedules
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class BranchSchedule:
    """Per-layer radii (one per scale) and centroid counts of one branch."""

    radii: tuple[tuple[float, ...], ...]
    group_sizes: tuple[int, ...]
    samples_per_group: int = 32

    def __post_init__(self) -> None:
        radii = tuple(tuple(float(r) for r in layer) for layer in self.radii)
        sizes = tuple(int(s) for s in self.group_sizes)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "group_sizes", sizes)
        if not radii or len(radii) != len(sizes):
            raise ValidationError(f"need one radius entry per layer, got {len(radii)} for {len(sizes)} layers")
        arity = len(radii[0])
        if arity == 0 or any(len(layer) != arity for layer in radii):
            raise ValidationError("every layer needs the same number of scales")
        if any(r <= 0 for layer in radii for r in layer):
            raise ValidationError("radii must be positive")
        for scale in range(arity):
            column = [layer[scale] for layer in radii]
            if any(b <= a for a, b in zip(column, column[1:])):
                raise ValidationError(f"radii of scale {scale} must increase across layers: {column}")
        if min(sizes) < 1 or any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValidationError(f"group sizes must be positive and strictly decreasing: {sizes}")
        if self.samples_per_group < 1:
            raise ValidationError("samples_per_group must be >= 1")

    @property
    def num_layers(self) -> int:
        return len(self.group_sizes)

    @property
    def num_scales(self) -> int:
        return len(self.radii[0])

    @property
    def kind(self) -> str:
        return "ssg" if self.num_scales == 1 else "msg"


def derive_group_sizes(budget: int, layers: int = 4, ratio: int = 4) -> tuple[int, ...]:
    """Centroid counts shrinking by `ratio` per layer, starting at budget/ratio."""
    if layers < 1 or ratio < 2:
        raise ValidationError(f"need layers >= 1 and ratio >= 2, got {layers}, {ratio}")
    sizes = tuple(budget // ratio ** (layer + 1) for layer in range(layers))
    if sizes[-1] < 1:
        raise ValidationError(f"budget {budget} is too small for {layers} layers at ratio {ratio}")
    return sizes


def default_schedules(
    kind: str,
    budget: SamplingBudget,
    config: PipelineConfig | None = None,
) -> dict[str, BranchSchedule]:
    """Per-branch schedules; msg radii scale the base schedule by each branch's layer-1 ratio."""
    config = config or PipelineConfig()
    schedules: dict[str, BranchSchedule] = {}
    for name in REGIONS:
        sizes = derive_group_sizes(budget.region(name), config.num_layers, config.layer_ratio)
        if kind == "ssg":
            radii = tuple((r,) for r in config.ssg_radii[name])
        elif kind == "msg":
            base = config.msg_base_radii
            first = config.msg_layer1_radii[name]
            scale = [f / b for f, b in zip(first, base[0])]
            radii = tuple(tuple(round(r * s, 9) for r, s in zip(layer, scale)) for layer in base)
        else:
            raise ValidationError(f"unknown grouping kind {kind!r}")
        schedules[name] = BranchSchedule(radii[: len(sizes)], sizes, config.samples_per_group)
    return schedules


# ----------------------------------------------------------------------
# Proposals
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class ProposalRatios:
    near: float = 0.3
    mid: float = 0.5
    far: float = 0.2

    def __post_init__(self) -> None:
        values = (self.near, self.mid, self.far)
        if any(not 0.0 < v < 1.0 for v in values):
            raise ValidationError(f"proposal ratios must lie in (0, 1), got {values}")
        if abs(math.fsum(values) - 1.0) > 1e-9:
            raise ValidationError(f"proposal ratios must sum to 1, got {math.fsum(values)}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.near, self.mid, self.far)


def allocate_proposals(total: int, ratios: ProposalRatios | None = None) -> dict[str, int]:
    """Split a proposal count by ratio with largest-remainder rounding."""
    if total < 0:
        raise ValidationError(f"proposal total must be >= 0, got {total}")
    ratios = ratios or ProposalRatios()
    raw = [total * r for r in ratios.as_tuple()]
    counts = [math.floor(v) for v in raw]
    leftover = total - sum(counts)
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return dict(zip(REGIONS, counts))


# ----------------------------------------------------------------------
# Layered pipeline
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class LayerGroups:
    """One set-abstraction layer; indices refer to the previous layer's points."""

    centroid_indices: np.ndarray
    centroids: np.ndarray
    radii: tuple[float, ...]
    groups: tuple[np.ndarray, ...]
    counts: tuple[np.ndarray, ...]

    @property
    def shape(self) -> dict[str, object]:
        return {
            "centroids": int(self.centroid_indices.size),
            "groups": [list(g.shape) for g in self.groups],
            "radii": list(self.radii),
        }


@dataclass(frozen=True, slots=True)
class BranchResult:
    name: str
    cloud_indices: np.ndarray
    valid: np.ndarray
    xyz: np.ndarray
    layers: tuple[LayerGroups, ...]


@dataclass(frozen=True, slots=True)
class BranchPipeline:
    budget: SamplingBudget
    branches: Mapping[str, BranchResult]

    def shapes(self) -> dict[str, list[dict[str, object]]]:
        return {name: [layer.shape for layer in self.branches[name].layers] for name in REGIONS}

    def concatenated_indices(self) -> np.ndarray:
        """Sampled cloud indices in near, mid, far order."""
        return np.concatenate([self.branches[name].cloud_indices for name in REGIONS])

    def concatenated_xyz(self) -> np.ndarray:
        return np.concatenate([self.branches[name].xyz for name in REGIONS])


def _run_branch(
    name: str,
    cloud: PointCloud,
    region: np.ndarray,
    budget: int,
    schedule: BranchSchedule,
    seed: np.random.SeedSequence,
) -> BranchResult:
    indices = sample_region(region, budget, seed)
    valid = indices != PAD_INDEX
    xyz = np.zeros((budget, 3), dtype=np.float64)
    if valid.any():
        xyz[valid] = cloud.xyz[indices[valid]]
    else:
        logger.warning("Region {} of frame {!r} is empty; padding {} zero points", name, cloud.frame_id, budget)

    layers: list[LayerGroups] = []
    current = xyz
    for size, radii in zip(schedule.group_sizes, schedule.radii):
        picked = farthest_point_sampling(current, size)
        centroids = current[picked]
        grouped = [ball_query(centroids, current, r, schedule.samples_per_group) for r in radii]
        layers.append(
            LayerGroups(
                centroid_indices=picked,
                centroids=centroids,
                radii=radii,
                groups=tuple(g for g, _ in grouped),
                counts=tuple(c for _, c in grouped),
            )
        )
        current = centroids
    return BranchResult(name, indices, valid, xyz, tuple(layers))


def build_branch_pipeline(
    cloud: PointCloud,
    partition: RegionPartition,
    budget: SamplingBudget,
    schedules: Mapping[str, BranchSchedule],
    seed: int | None = None,
    parallel: bool = True,
    max_workers: int | None = None,
) -> BranchPipeline:
    """Sample each region to its budget and run the layered FPS + ball query per branch.

    Branch seeds are spawned from one SeedSequence so the result does not
    depend on whether branches run serially or on threads.
    """
    layer_counts = {schedules[name].num_layers for name in REGIONS}
    if len(layer_counts) != 1:
        raise ValidationError(f"branch schedules disagree on layer count: {sorted(layer_counts)}")

    seeds = np.random.SeedSequence(seed).spawn(len(REGIONS))
    jobs = [
        (name, cloud, partition.region(name), budget.region(name), schedules[name], child)
        for name, child in zip(REGIONS, seeds)
    ]

    if parallel:
        workers = max_workers or min(len(REGIONS), get_thread_count())
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_branch(*job), jobs))
    else:
        results = [_run_branch(*job) for job in jobs]

    return BranchPipeline(budget=budget, branches={r.name: r for r in results})

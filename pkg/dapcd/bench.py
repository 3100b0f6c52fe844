"""Wall-clock benchmarks of the pipeline kernels."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from loguru import logger

from .augmentation import AugmentConfig, augment_scene
from .config import PipelineConfig
from .errors import ValidationError
from .eval import nms_bev_indices
from .geometry import iou_matrix, points_in_box
from .partition import KITTI_DENSITY_STATS, DensityStats, RegionSpec, partition_points
from .records import Detection, GroundTruth, OrientedBox3D, PointCloud
from .sampling import (
    allocate_budget,
    ball_query,
    build_branch_pipeline,
    default_schedules,
    farthest_point_sampling,
    get_strategy,
)
from .targets import (
    BinConfig,
    BinPredictions,
    BinTargets,
    FocalParams,
    LossTerms,
    bin_regression_loss,
    encode_bin_targets,
    refine_loss,
    rpn_loss,
)

__all__ = ["STAGES", "BenchReport", "bench", "compare_serial_parallel"]

STAGES = ("partition", "allocate", "fps", "ball_query", "sample", "targets", "iou", "nms", "augment")


@dataclass(frozen=True, slots=True)
class BenchReport:
    stage: str
    repetitions: int
    n_points: int
    samples_ms: tuple[float, ...]

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def p50_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    def as_dict(self) -> dict[str, object]:
        return {
            "stage": self.stage,
            "repetitions": self.repetitions,
            "n_points": self.n_points,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
        }


def _boxes(gts: Sequence[GroundTruth]) -> list:
    return [gt.box for gt in gts if gt.box is not None and not gt.dont_care]


def _targets_step(
    cloud: PointCloud,
    boxes: Sequence[OrientedBox3D],
    config: PipelineConfig,
) -> tuple[LossTerms, LossTerms]:
    """Encode stage-one and refinement targets for a scene and evaluate both losses."""
    bins = BinConfig.from_pipeline(config)
    refine_bins = BinConfig.from_pipeline(config, refinement=True)
    focal, beta = FocalParams.from_pipeline(config), config.smooth_l1_beta

    labels = np.zeros(len(cloud), dtype=bool)
    encoded = []
    for box in boxes:
        inside = points_in_box(cloud, box)
        labels[inside] = True
        encoded.extend(encode_bin_targets(cloud.xyz[i], box, bins) for i in inside)
    rpn = rpn_loss(np.where(labels, 0.8, 0.2), labels, focal=focal, beta=beta)
    if encoded:
        targets = BinTargets.stack(encoded)
        regression = bin_regression_loss(targets, BinPredictions.perfect(targets, bins), ~targets.ignore, beta)
        rpn = LossTerms(rpn.classification, regression)

    if not boxes:
        return rpn, LossTerms(0.0, 0.0)
    # proposals offset by a quarter of the refinement search range
    shift = 0.25 * refine_bins.search_range
    proposals = [(box.center[0] + shift, box.center[1] - shift, box.center[2]) for box in boxes]
    refine_targets = BinTargets.stack(encode_bin_targets(p, box, refine_bins) for p, box in zip(proposals, boxes))
    positive = np.ones(len(boxes), dtype=bool)
    refine = refine_loss(
        np.full(len(boxes), 0.9),
        positive,
        refine_targets,
        BinPredictions.perfect(refine_targets, refine_bins),
        beta=beta,
    )
    return rpn, refine


def _stage_callable(
    stage: str,
    cloud: PointCloud,
    gts: Sequence[GroundTruth],
    config: PipelineConfig,
    seed: int,
    stats: DensityStats,
) -> Callable[[], object]:
    spec = RegionSpec(config.boundaries, config.max_range, config.train_overlap, config.range_metric)
    strategy = get_strategy(config.strategy, config.granularity)
    if stage == "partition":
        return lambda: partition_points(cloud, spec)
    if stage == "allocate":
        return lambda: allocate_budget(stats, strategy, config.total_points)
    if stage == "fps":
        k = max(1, min(len(cloud), config.total_points) // config.layer_ratio)
        return lambda: farthest_point_sampling(cloud, k, seed=seed)
    if stage == "ball_query":
        centers = cloud.xyz[farthest_point_sampling(cloud, max(1, len(cloud) // 16), seed=seed)]
        return lambda: ball_query(centers, cloud, config.ssg_radii["near"][0], config.samples_per_group)
    if stage == "sample":
        partition = partition_points(cloud, spec)
        budget = allocate_budget(stats, strategy, config.total_points)
        schedules = default_schedules(config.grouping, budget, config)
        return lambda: build_branch_pipeline(cloud, partition, budget, schedules, seed=seed)
    if stage == "targets":
        boxes = _boxes(gts)
        return lambda: _targets_step(cloud, boxes, config)
    if stage == "iou":
        boxes = _boxes(gts)
        return lambda: iou_matrix(boxes, boxes, config.iou_kind)
    if stage == "nms":
        dets = [Detection(box, score=1.0 - 0.01 * i) for i, box in enumerate(_boxes(gts))]
        return lambda: nms_bev_indices(dets, config.nms_threshold)
    if stage == "augment":
        aug = AugmentConfig.from_pipeline(config)
        return lambda: augment_scene(cloud, gts, aug, seed)
    raise ValidationError(f"unknown bench stage {stage!r}; choose from {', '.join(STAGES)}")


def _time(fn: Callable[[], object], repetitions: int) -> tuple[float, ...]:
    fn()  # warmup, not reported
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return tuple(samples)


def bench(
    stage: str,
    cloud: PointCloud,
    gts: Sequence[GroundTruth] = (),
    repetitions: int = 5,
    config: PipelineConfig | None = None,
    seed: int = 0,
    stats: DensityStats | None = None,
) -> BenchReport:
    if repetitions < 3:
        raise ValidationError(f"need at least 3 repetitions, got {repetitions}")
    config = config or PipelineConfig()
    fn = _stage_callable(stage, cloud, gts, config, seed, stats or KITTI_DENSITY_STATS)
    report = BenchReport(stage, repetitions, len(cloud), _time(fn, repetitions))
    logger.info("bench {}: mean {:.3f} ms, p95 {:.3f} ms", stage, report.mean_ms, report.p95_ms)
    return report


def _same_pipeline(a, b) -> bool:
    for name, branch in a.branches.items():
        other = b.branches[name]
        if not np.array_equal(branch.cloud_indices, other.cloud_indices):
            return False
        for la, lb in zip(branch.layers, other.layers):
            if not np.array_equal(la.centroid_indices, lb.centroid_indices):
                return False
            if not all(np.array_equal(ga, gb) for ga, gb in zip(la.groups, lb.groups)):
                return False
    return True


def compare_serial_parallel(
    cloud: PointCloud,
    config: PipelineConfig | None = None,
    seed: int = 0,
    repetitions: int = 3,
    stats: DensityStats | None = None,
) -> dict[str, object]:
    """Run the three-branch pipeline serially and on threads; outputs must match bit for bit."""
    if repetitions < 3:
        raise ValidationError(f"need at least 3 repetitions, got {repetitions}")
    config = config or PipelineConfig()
    spec = RegionSpec(config.boundaries, config.max_range, config.train_overlap, config.range_metric)
    partition = partition_points(cloud, spec)
    budget = allocate_budget(stats or KITTI_DENSITY_STATS, get_strategy(config.strategy, config.granularity), config.total_points)
    schedules = default_schedules(config.grouping, budget, config)

    def run(parallel: bool):
        return build_branch_pipeline(cloud, partition, budget, schedules, seed=seed, parallel=parallel)

    identical = _same_pipeline(run(False), run(True))
    serial = BenchReport("sample-serial", repetitions, len(cloud), _time(lambda: run(False), repetitions))
    parallel = BenchReport("sample-parallel", repetitions, len(cloud), _time(lambda: run(True), repetitions))
    return {"identical": identical, "serial": serial.as_dict(), "parallel": parallel.as_dict()}

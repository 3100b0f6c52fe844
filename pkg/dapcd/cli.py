"""Command-line entry point: JSON on stdout, loguru on stderr, exit codes from PcdError."""
from __future__ import annotations

import os
import sys
import time
from pathlib import Path

import click
import numpy as np
from loguru import logger

from .augmentation import AugmentConfig, augment_scene, build_gt_database, gt_aug_insert
from .bench import STAGES, bench, compare_serial_parallel
from .config import PROVENANCE, PipelineConfig, get_log_level, load_pipeline_config
from .dataset import frame_paths, iter_clouds, list_frames, resolve_kitti_root
from .db import INDEX_NAME, default_db_root, load_gt_database, save_gt_database
from .errors import PcdError
from .eval import DifficultyRules, evaluate, nms_bev
from .kitti_io import (
    read_calibration,
    read_detections,
    read_labels,
    read_velodyne,
    write_calibration,
    write_labels,
    write_velodyne,
)
from .partition import (
    KITTI_DENSITY_STATS,
    DensityStats,
    RegionSpec,
    compute_density_stats,
    histogram_by_range,
    load_density_stats,
    partition_points,
)
from .sampling import (
    STRATEGIES,
    ProposalRatios,
    allocate_budget,
    allocate_proposals,
    build_branch_pipeline,
    default_schedules,
    get_strategy,
)
from .synthetic import SyntheticSceneSpec, generate_dataset, generate_scene
from .utils import dump_json, write_table_csv

__all__ = ["cli", "main"]

_LEVELS = ["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"]


class PcdGroup(click.Group):
    """Maps library exceptions onto their structured exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except PcdError as exc:
            logger.error("{}: {}", type(exc).__name__, exc)
            ctx.exit(exc.exit_code)


def _emit(payload: object) -> None:
    click.echo(dump_json(payload))


def _config(ctx: click.Context) -> PipelineConfig:
    return ctx.obj["config"]


def _region_spec(config: PipelineConfig, overlap: float | None = None, metric: str | None = None) -> RegionSpec:
    return RegionSpec(
        config.boundaries,
        config.max_range,
        config.train_overlap if overlap is None else overlap,
        metric or config.range_metric,
    )


def _load_stats(path: str | None) -> DensityStats:
    if path is None:
        return KITTI_DENSITY_STATS
    return load_density_stats(path)


@click.group(cls=PcdGroup)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config overlay.")
@click.option("--log-level", type=click.Choice(_LEVELS, case_sensitive=False), default=None)
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Cap on worker threads.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, log_level: str | None, threads: int | None) -> None:
    """Density-aware point-cloud pipeline tools."""
    logger.remove()
    handler = logger.add(sys.stderr, level=(log_level or get_log_level()).upper())
    ctx.call_on_close(lambda: logger.remove(handler))
    if threads is not None:
        os.environ["PCD_THREADS"] = str(threads)
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_pipeline_config(config_path)


@cli.command()
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--split", "split_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--boundaries", nargs=2, type=float, default=None)
@click.option("--max-range", type=float, default=None)
@click.option("--bin-width", type=float, default=None)
@click.option("--metric", type=click.Choice(["forward", "euclidean"]), default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="Write the range histogram here.")
@click.pass_context
def stats(ctx, root, split_file, boundaries, max_range, bin_width, metric, csv_path) -> None:
    """Per-region density statistics and range histogram over a scan directory."""
    config = _config(ctx)
    spec = RegionSpec(
        tuple(boundaries) if boundaries else config.boundaries,
        max_range or config.max_range,
        0.0,
        metric or config.range_metric,
    )
    root = resolve_kitti_root(root)
    frames = list_frames(root, split_file)
    density = compute_density_stats(iter_clouds(root, frames), spec)
    histogram = histogram_by_range(
        iter_clouds(root, frames), bin_width or config.histogram_bin_width, spec.max_range, spec.metric
    )
    if csv_path:
        write_table_csv(csv_path, ["bin_start", "mean_count"], histogram.rows())
    _emit({"density_stats": density.as_dict(), "histogram": [list(row) for row in histogram.rows()]})


@cli.command()
@click.argument("scan", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["train", "inference"]), default="train")
@click.option("--overlap", type=float, default=None, help="Overrides the mode's overlap.")
@click.option("--metric", type=click.Choice(["forward", "euclidean"]), default=None)
@click.pass_context
def partition(ctx, scan, mode, overlap, metric) -> None:
    """Split one scan into near/mid/far regions."""
    config = _config(ctx)
    if overlap is None:
        overlap = config.train_overlap if mode == "train" else config.inference_overlap
    spec = _region_spec(config, overlap, metric)
    result = partition_points(read_velodyne(scan), spec)
    _emit(
        {
            "frame_id": Path(scan).stem,
            "bounds": spec.region_bounds(),
            "counts": result.counts(),
            "overlap_counts": {k: int(v.size) for k, v in result.overlap_indices().items()},
        }
    )


@cli.command()
@click.argument("scan", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--strategy", type=click.Choice(list(STRATEGIES)), default=None)
@click.option("--total", type=int, default=None)
@click.option("--overlap", type=float, default=None)
@click.option("--grouping", type=click.Choice(["msg", "ssg"]), default=None)
@click.option("--stats", "stats_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="DensityStats JSON (output of `stats`); defaults to the published KITTI values.")
@click.option("--proposals", type=int, default=None, help="Also split this many proposals by region.")
@click.option("--seed", type=int, default=0)
@click.option("--serial", is_flag=True, help="Run branches one after another.")
@click.pass_context
def sample(ctx, scan, strategy, total, overlap, grouping, stats_path, proposals, seed, serial) -> None:
    """Allocate budgets and run the layered three-branch sampling pipeline."""
    config = _config(ctx)
    cloud = read_velodyne(scan) if scan else generate_scene(seed=seed)[0]
    budget = allocate_budget(
        _load_stats(stats_path),
        get_strategy(strategy or config.strategy, config.granularity),
        total or config.total_points,
    )
    schedules = default_schedules(grouping or config.grouping, budget, config)
    regions = partition_points(cloud, _region_spec(config, overlap))

    start = time.perf_counter()
    pipeline = build_branch_pipeline(cloud, regions, budget, schedules, seed=seed, parallel=not serial)
    elapsed = (time.perf_counter() - start) * 1000.0

    payload = {
        "frame_id": cloud.frame_id,
        "budget": budget.as_dict(),
        "region_counts": regions.counts(),
        "shapes": pipeline.shapes(),
        "timing_ms": elapsed,
    }
    if proposals is not None:
        payload["proposals"] = allocate_proposals(proposals, ProposalRatios(*config.proposal_ratios))
    _emit(payload)


@cli.command()
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.argument("frame_id")
@click.option("--flip-prob", type=float, default=None)
@click.option("--scale", nargs=2, type=float, default=None)
@click.option("--rot", type=float, default=None, help="Rotation half-range, radians.")
@click.option("--gtaug", type=int, default=None, help="Maximum GT-AUG insertions (0 disables).")
@click.option("--db", "db_path", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
def augment(ctx, root, frame_id, flip_prob, scale, rot, gtaug, db_path, seed, out_dir) -> None:
    """Augment one KITTI frame (GT-AUG first, then flip, scale, rotation)."""
    config = _config(ctx)
    base = AugmentConfig.from_pipeline(config)
    aug = AugmentConfig(
        flip_prob=base.flip_prob if flip_prob is None else flip_prob,
        scale_range=tuple(scale) if scale else base.scale_range,
        rot_range=base.rot_range if rot is None else rot,
        gtaug_max_inserts=base.gtaug_max_inserts if gtaug is None else gtaug,
        gtaug_min_points=base.gtaug_min_points,
        gtaug_iou_threshold=base.gtaug_iou_threshold,
    )
    root = resolve_kitti_root(root)
    paths = frame_paths(root, frame_id)
    calib = read_calibration(paths["calib"])
    cloud, gts = read_velodyne(paths["velodyne"]), read_labels(paths["label"], calib)
    original_points = len(cloud)

    gt_seed, aug_seed = np.random.SeedSequence(seed).spawn(2)
    inserted = removed = 0
    db_root = Path(db_path) if db_path else default_db_root()
    if aug.gtaug_max_inserts > 0 and (db_root / INDEX_NAME).exists():
        inserted_result = gt_aug_insert(cloud, gts, load_gt_database(db_root), aug, gt_seed)
        cloud, gts = inserted_result.cloud, inserted_result.gts
        inserted, removed = inserted_result.inserted, inserted_result.removed_points

    result = augment_scene(cloud, gts, aug, aug_seed)
    if out_dir:
        out_paths = frame_paths(out_dir, frame_id)
        write_velodyne(out_paths["velodyne"], result.cloud)
        write_labels(out_paths["label"], result.gts, calib)
        write_calibration(out_paths["calib"], calib)
    _emit(
        {
            "frame_id": frame_id,
            "ops": result.ops.as_dict(),
            "gtaug_inserted": inserted,
            "gtaug_removed_points": removed,
            "points_before": original_points,
            "points_after": len(result.cloud),
            "num_gts": len(result.gts),
        }
    )


@cli.command("gt-db")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--split", "split_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--min-points", type=int, default=None)
@click.pass_context
def gt_db(ctx, root, split_file, out_dir, min_points) -> None:
    """Build the GT-AUG object database from a KITTI root."""
    config = _config(ctx)
    root = resolve_kitti_root(root)

    def scenes():
        for frame in list_frames(root, split_file):
            paths = frame_paths(root, frame)
            calib = read_calibration(paths["calib"])
            yield read_velodyne(paths["velodyne"]), read_labels(paths["label"], calib)

    db = build_gt_database(scenes(), min_points or config.gtaug_min_points)
    index = save_gt_database(db, out_dir)
    _emit({"entries": len(db), "index": str(index)})


@cli.command("eval")
@click.option("--dets", "dets_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gts", "gts_root", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--iou", "iou_threshold", type=float, default=None)
@click.option("--mode", type=click.Choice(["R11", "R40"]), default=None)
@click.option("--kind", type=click.Choice(["3d", "bev"]), default=None)
@click.option("--nms", "nms_threshold", type=float, default=None, help="Apply BEV NMS before matching.")
@click.pass_context
def eval_command(ctx, dets_dir, gts_root, iou_threshold, mode, kind, nms_threshold) -> None:
    """AP for easy/moderate/hard over a directory of per-frame detection files."""
    config = _config(ctx)
    dets, gts, calibs = [], [], {}
    for frame in sorted(p.stem for p in (Path(gts_root) / "label_2").glob("*.txt")):
        paths = frame_paths(gts_root, frame)
        calibs[frame] = read_calibration(paths["calib"])
        gts.extend(read_labels(paths["label"], calibs[frame]))
        det_file = Path(dets_dir) / f"{frame}.txt"
        if det_file.exists():
            frame_dets = read_detections(det_file)
            dets.extend(nms_bev(frame_dets, nms_threshold) if nms_threshold else frame_dets)

    _emit(
        evaluate(
            dets,
            gts,
            iou_threshold or config.iou_threshold,
            mode or config.ap_mode,
            kind or config.iou_kind,
            DifficultyRules.from_config(config),
            calibs=calibs,
        )
    )


@cli.command("bench")
@click.argument("stage", type=click.Choice(list(STAGES) + ["compare"]))
@click.option("--scan", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--repetitions", type=click.IntRange(min=3), default=5)
@click.option("--seed", type=int, default=0)
@click.pass_context
def bench_command(ctx, stage, scan, repetitions, seed) -> None:
    """Time one pipeline stage (or compare serial and threaded branches)."""
    config = _config(ctx)
    if scan:
        cloud, gts = read_velodyne(scan), []
    else:
        cloud, gts = generate_scene(seed=seed)
    if stage == "compare":
        _emit(compare_serial_parallel(cloud, config, seed, repetitions))
        return
    _emit(bench(stage, cloud, gts, repetitions, config, seed).as_dict())


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--scenes", type=click.IntRange(min=1), default=1)
@click.option("--cars", nargs=3, type=int, default=None, help="Cars in near, mid and far.")
@click.option("--seed", type=int, default=0)
def synth(out_dir, scenes, cars, seed) -> None:
    """Write synthetic KITTI-layout scenes (velodyne/, label_2/, calib/)."""
    spec = SyntheticSceneSpec(n_cars=tuple(cars)) if cars else SyntheticSceneSpec()
    frames = generate_dataset(out_dir, scenes, spec, seed)
    _emit({"root": str(Path(out_dir).resolve()), "frames": frames})


@cli.command("config")
@click.pass_context
def config_command(ctx) -> None:
    """Print the effective pipeline config and where each default comes from."""
    _emit({"config": _config(ctx).to_dict(), "provenance": PROVENANCE})


def main() -> None:
    cli(prog_name="dapcd")


if __name__ == "__main__":  # pragma: no cover
    main()

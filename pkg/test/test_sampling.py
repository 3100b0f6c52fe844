from __future__ import annotations

import math
import time

import numpy as np
import pytest

from dapcd.errors import InfeasibleStrategyError, ValidationError
from dapcd.partition import KITTI_DENSITY_STATS, DensityStats, RegionSpec, partition_points
from dapcd.records import PointCloud
from dapcd.sampling import (
    PAD_INDEX,
    BranchSchedule,
    ProposalRatios,
    SamplingBudget,
    StrategySpec,
    allocate_budget,
    allocate_proposals,
    ball_query,
    build_branch_pipeline,
    default_schedules,
    derive_group_sizes,
    farthest_point_sampling,
    get_strategy,
    sample_region,
)
from dapcd.synthetic import generate_scene


def _brute_force_fps(xyz: np.ndarray, k: int, start: int) -> list[int]:
    d2 = ((xyz[:, None, :] - xyz[None, :, :]) ** 2).sum(axis=2)
    chosen = [start]
    for _ in range(1, k):
        nearest = d2[chosen].min(axis=0)
        nearest[chosen] = -1.0
        chosen.append(int(np.argmax(nearest)))
    return chosen


def _min_pairwise(xyz: np.ndarray) -> float:
    d2 = ((xyz[:, None, :] - xyz[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


@pytest.mark.parametrize(
    ("strategy", "expected"),
    [
        ("4", (9216, 5120, 2048)),
        ("3", (8192, 6144, 2048)),
        ("2", (9216, 5120, 2048)),
        ("1", (10240, 5120, 1024)),
        ("original", (11264, 4096, 1024)),
        ("natural", (11264, 4096, 1024)),
    ],
)
def test_budgets_for_published_stats(strategy, expected):
    budget = allocate_budget(KITTI_DENSITY_STATS, get_strategy(strategy), 16384)
    assert budget.as_tuple() == expected
    assert sum(budget.as_tuple()) == 16384


def test_zero_spread_rounds_means_to_granules():
    stats = DensityStats((12000.0, 3000.0, 1000.0), (0.0, 0.0, 0.0), 2)
    assert allocate_budget(stats, StrategySpec(1.0, 1.0), 16384).as_tuple() == (12288, 3072, 1024)


def test_budgets_conserve_total_and_granularity(rng):
    checked = 0
    for _ in range(200):
        m = tuple(rng.uniform([8000, 1000, 200], [16000, 5000, 2000]))
        sigma = tuple(rng.uniform(0.0, 1500.0, 3))
        stats = DensityStats(m, sigma, 10)
        try:
            budget = allocate_budget(stats, get_strategy("4"), 16384)
        except InfeasibleStrategyError:
            continue
        assert sum(budget.as_tuple()) == 16384
        assert budget.mid % 1024 == 0 and budget.far % 1024 == 0
        assert budget.near > max(budget.mid, budget.far)
        checked += 1
    assert checked > 100


def test_far_budget_grows_with_far_multiplier():
    fars = []
    for k_far in (0.0, 0.5, 1.0, 1.5, 2.0, 2.5):
        try:
            fars.append(allocate_budget(KITTI_DENSITY_STATS, StrategySpec(1.0, k_far), 16384).far)
        except InfeasibleStrategyError:
            break
    assert len(fars) >= 4
    assert fars == sorted(fars)


def test_strategy_that_starves_near_is_infeasible():
    stats = DensityStats((1000.0, 9000.0, 9000.0), (0.0, 0.0, 0.0), 2)
    with pytest.raises(InfeasibleStrategyError):
        allocate_budget(stats, get_strategy("1"), 16384)


def test_near_must_stay_largest():
    stats = DensityStats((6000.0, 8000.0, 1000.0), (0.0, 0.0, 0.0), 2)
    with pytest.raises(InfeasibleStrategyError):
        allocate_budget(stats, get_strategy("1"), 16384)


def test_budget_needs_three_granules():
    with pytest.raises(ValidationError):
        allocate_budget(KITTI_DENSITY_STATS, get_strategy("4"), 2048)


def test_unknown_strategy_and_bad_multipliers():
    with pytest.raises(ValidationError):
        get_strategy("5")
    with pytest.raises(ValidationError):
        StrategySpec(-1.0, 0.0)
    with pytest.raises(ValidationError):
        SamplingBudget(16384, 9216, 5120, 1024)


def test_sample_region_without_replacement():
    picked = sample_region(np.arange(10), 4, seed=1)
    assert picked.size == 4
    assert len(set(picked.tolist())) == 4
    assert set(picked.tolist()) <= set(range(10))


def test_sample_region_short_region_keeps_every_point():
    picked = sample_region([4, 8, 15], 7, seed=2)
    assert picked.size == 7
    assert {4, 8, 15} <= set(picked.tolist())
    assert set(picked.tolist()) == {4, 8, 15}


def test_sample_region_is_deterministic_per_seed():
    assert sample_region(np.arange(100), 30, seed=5).tolist() == sample_region(np.arange(100), 30, seed=5).tolist()


def test_empty_region_is_padded():
    assert sample_region([], 5, seed=0).tolist() == [PAD_INDEX] * 5


def test_sample_region_is_uniform():
    rng = np.random.default_rng(99)
    trials, n, k = 10_000, 10, 4
    hits = np.zeros(n, dtype=np.int64)
    for _ in range(trials):
        hits[sample_region(np.arange(n), k, rng)] += 1
    expected = trials * k / n
    sd = math.sqrt(trials * (k / n) * (1 - k / n))
    assert np.abs(hits - expected).max() < 4.5 * sd


def test_fps_takes_the_diagonal_corner_second():
    square = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    assert farthest_point_sampling(square, 2, start=0).tolist() == [0, 2]


def test_fps_with_k_equal_n_is_a_permutation(rng):
    xyz = rng.normal(size=(50, 3))
    assert sorted(farthest_point_sampling(xyz, 50, seed=3).tolist()) == list(range(50))


def test_fps_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(20, 300))
        k = int(rng.integers(1, n + 1))
        xyz = rng.uniform(-5.0, 5.0, (n, 3))
        start = int(rng.integers(n))
        assert farthest_point_sampling(xyz, k, start=start).tolist() == _brute_force_fps(xyz, k, start)


def test_fps_tiles_when_k_exceeds_points(rng):
    xyz = rng.normal(size=(5, 3))
    picked = farthest_point_sampling(xyz, 12, seed=0)
    assert picked.size == 12
    assert sorted(picked[:5].tolist()) == list(range(5))
    assert picked[5:10].tolist() == picked[:5].tolist()


def test_fps_is_deterministic(rng):
    xyz = rng.normal(size=(300, 3))
    assert farthest_point_sampling(xyz, 40, seed=11).tolist() == farthest_point_sampling(xyz, 40, seed=11).tolist()
    assert farthest_point_sampling(xyz, 40).tolist() == farthest_point_sampling(xyz, 40).tolist()


def test_fps_spreads_points_wider_than_random(rng):
    wins = 0
    for _ in range(20):
        xyz = rng.uniform(0.0, 10.0, (500, 3))
        fps = xyz[farthest_point_sampling(xyz, 32, seed=rng)]
        random = xyz[rng.choice(500, 32, replace=False)]
        wins += _min_pairwise(fps) >= _min_pairwise(random)
    assert wins >= 19


def test_fps_rejects_empty_input():
    with pytest.raises(ValidationError):
        farthest_point_sampling(np.zeros((0, 3)), 1)


def test_ball_query_on_coincident_point():
    cloud = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [9.0, 0.0, 0.0]])
    groups, counts = ball_query(cloud[1:2], cloud, 0.1, 4)
    assert groups.tolist() == [[1, 1, 1, 1]]
    assert counts.tolist() == [1]


def test_ball_query_large_radius_returns_all_ascending(rng):
    cloud = rng.normal(size=(20, 3))
    groups, counts = ball_query(cloud[:3], cloud, 100.0, 20)
    assert groups.tolist() == [list(range(20))] * 3
    assert counts.tolist() == [20, 20, 20]


def test_ball_query_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(50, 500))
        cloud = rng.uniform(-2.0, 2.0, (n, 3))
        centroids = cloud[rng.choice(n, 40, replace=False)]
        # some centroids off the cloud exercise the nearest-point fallback
        centroids[:4] += rng.uniform(2.0, 4.0, (4, 3))
        radius, k = float(rng.uniform(0.1, 1.0)), int(rng.integers(1, 48))

        groups, counts = ball_query(centroids, cloud, radius, k, chunk_size=7)

        for c, group, count in zip(centroids, groups, counts):
            d2 = ((cloud - c) ** 2).sum(axis=1)
            inside = np.flatnonzero(d2 <= radius * radius)[:k].tolist()
            assert count == len(inside)
            assert group[:count].tolist() == inside
            fill = inside[0] if inside else int(np.argmin(d2))
            assert set(group[count:].tolist()) <= {fill}


def test_ball_query_without_neighbour_falls_back_to_nearest():
    cloud = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    groups, counts = ball_query(np.array([[2.5, 0.0, 0.0]]), cloud, 0.1, 3)
    assert groups.tolist() == [[1, 1, 1]]
    assert counts.tolist() == [0]


def test_derive_group_sizes():
    assert derive_group_sizes(9216) == (2304, 576, 144, 36)
    assert derive_group_sizes(5120) == (1280, 320, 80, 20)
    assert derive_group_sizes(2048) == (512, 128, 32, 8)


def test_default_msg_schedule_scales_radii():
    budget = SamplingBudget(16384, 9216, 5120, 2048)
    schedules = default_schedules("msg", budget)

    assert schedules["near"].radii == ((0.1, 0.5), (0.5, 1.0), (1.0, 2.0), (2.0, 4.0))
    assert schedules["mid"].radii == ((0.2, 0.6), (1.0, 1.2), (2.0, 2.4), (4.0, 4.8))
    assert schedules["far"].radii == ((0.4, 0.8), (2.0, 1.6), (4.0, 3.2), (8.0, 6.4))
    assert schedules["far"].group_sizes == (512, 128, 32, 8)
    assert schedules["near"].kind == "msg"


def test_default_ssg_schedule():
    schedules = default_schedules("ssg", SamplingBudget(16384, 9216, 5120, 2048))
    assert schedules["near"].radii == ((0.4,), (0.8,), (1.6,), (3.2,))
    assert schedules["near"].kind == "ssg"
    with pytest.raises(ValidationError):
        default_schedules("dense", SamplingBudget(16384, 9216, 5120, 2048))


def test_schedule_rejects_shrinking_radii():
    with pytest.raises(ValidationError):
        BranchSchedule(((1.0,), (0.5,)), (8, 2))
    with pytest.raises(ValidationError):
        BranchSchedule(((0.5,), (1.0,)), (2, 8))


def test_proposal_split():
    assert allocate_proposals(100) == {"near": 30, "mid": 50, "far": 20}
    assert allocate_proposals(7) == {"near": 2, "mid": 4, "far": 1}
    assert sum(allocate_proposals(513).values()) == 513
    with pytest.raises(ValidationError):
        ProposalRatios(0.5, 0.5, 0.1)


def _small_pipeline_inputs(cloud: PointCloud):
    partition = partition_points(cloud, RegionSpec.training())
    budget = SamplingBudget(4096, 2304, 1280, 512)
    return partition, budget, default_schedules("msg", budget)


def test_pipeline_shapes_and_radius(synthetic_scene):
    cloud, _ = synthetic_scene
    partition, budget, schedules = _small_pipeline_inputs(cloud)

    result = build_branch_pipeline(cloud, partition, budget, schedules, seed=4)

    near_shapes = result.shapes()["near"]
    assert [layer["centroids"] for layer in near_shapes] == [576, 144, 36, 9]
    assert near_shapes[0]["groups"] == [[576, 32], [576, 32]]
    assert result.concatenated_indices().size == 4096
    assert result.concatenated_xyz().shape == (4096, 3)
    for name in ("near", "mid", "far"):
        branch = result.branches[name]
        assert set(branch.cloud_indices[branch.valid].tolist()) <= set(partition.region(name).tolist())
        previous = branch.xyz
        for layer in branch.layers:
            assert layer.centroid_indices.max() < len(previous)
            for radius, groups, counts in zip(layer.radii, layer.groups, layer.counts):
                for centroid, group, count in zip(layer.centroids, groups, counts):
                    members = previous[group[:count]]
                    assert (((members - centroid) ** 2).sum(axis=1) <= radius * radius).all()
            previous = layer.centroids


def test_pipeline_is_identical_serial_and_parallel(synthetic_scene):
    cloud, _ = synthetic_scene
    partition, budget, schedules = _small_pipeline_inputs(cloud)

    serial = build_branch_pipeline(cloud, partition, budget, schedules, seed=8, parallel=False)
    threaded = build_branch_pipeline(cloud, partition, budget, schedules, seed=8, parallel=True, max_workers=3)

    np.testing.assert_array_equal(serial.concatenated_indices(), threaded.concatenated_indices())
    for name in ("near", "mid", "far"):
        for a, b in zip(serial.branches[name].layers, threaded.branches[name].layers):
            np.testing.assert_array_equal(a.centroid_indices, b.centroid_indices)
            for ga, gb in zip(a.groups, b.groups):
                np.testing.assert_array_equal(ga, gb)


def test_pipeline_pads_an_empty_far_region():
    xs = np.linspace(1.0, 35.0, 3000)
    cloud = PointCloud.from_xyz(np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)]))
    partition, budget, schedules = _small_pipeline_inputs(cloud)

    result = build_branch_pipeline(cloud, partition, budget, schedules, seed=1)

    far = result.branches["far"]
    assert not far.valid.any()
    assert (far.cloud_indices == PAD_INDEX).all()
    assert not far.xyz.any()
    assert [layer["centroids"] for layer in result.shapes()["far"]] == [128, 32, 8, 2]


def test_pipeline_rejects_mismatched_layer_counts(synthetic_scene):
    cloud, _ = synthetic_scene
    partition, budget, schedules = _small_pipeline_inputs(cloud)
    schedules = dict(schedules)
    schedules["far"] = BranchSchedule(((0.4,), (0.8,)), (128, 32))
    with pytest.raises(ValidationError):
        build_branch_pipeline(cloud, partition, budget, schedules, seed=1)


@pytest.mark.parametrize("kind", ["msg", "ssg"])
def test_full_scene_pipeline_runs_under_a_second(kind):
    cloud, _ = generate_scene(seed=0)
    keep = np.sort(np.random.default_rng(0).choice(len(cloud), 16384, replace=False))
    cloud = PointCloud(cloud.points[keep], cloud.frame_id)
    budget = allocate_budget(KITTI_DENSITY_STATS, get_strategy(4))
    schedules = default_schedules(kind, budget)

    timings = []
    for _ in range(3):
        start = time.perf_counter()
        partition = partition_points(cloud, RegionSpec.training())
        result = build_branch_pipeline(cloud, partition, budget, schedules, seed=1)
        timings.append(time.perf_counter() - start)

    assert result.concatenated_indices().size == 16384
    assert min(timings) < 1.0

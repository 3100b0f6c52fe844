from __future__ import annotations

import math

import numpy as np
import pytest

from dapcd.errors import UndefinedMetricError, ValidationError
from dapcd.eval import (
    DifficultyRules,
    assign_difficulty,
    average_precision,
    dont_care_overlap,
    evaluate,
    nms_bev,
    nms_bev_indices,
    recall_points,
)
from dapcd.geometry import bev_iou
from dapcd.records import Detection, GroundTruth, OrientedBox3D


def _make_box(x: float, y: float = 0.0, yaw: float = 0.0) -> OrientedBox3D:
    return OrientedBox3D((x, y, -0.9), (3.9, 1.6, 1.5), yaw)


def _make_gt(x: float, frame_id: str, height: float = 50.0, occlusion: int = 0, truncation: float = 0.0, label: str = "Car") -> GroundTruth:
    return GroundTruth(_make_box(x), label, truncation, occlusion, (100.0, 100.0, 150.0, 100.0 + height), frame_id=frame_id)


def _make_det(x: float, score: float, frame_id: str) -> Detection:
    return Detection(_make_box(x), score, frame_id)


def _fixture():
    gts = [_make_gt(10.0, "000000"), _make_gt(20.0, "000001")]
    dets = [
        _make_det(10.0, 0.9, "000000"),
        _make_det(35.0, 0.8, "000002"),
        _make_det(20.0, 0.7, "000001"),
    ]
    return dets, gts


def _brute_force_nms(dets, threshold):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    suppressed = set()
    kept = []
    for pos, i in enumerate(order):
        if i in suppressed:
            continue
        kept.append(i)
        for j in order[pos + 1:]:
            if bev_iou(dets[i].box, dets[j].box) > threshold:
                suppressed.add(j)
    return kept


def test_nms_keeps_first_of_identical_boxes():
    dets = [_make_det(10.0, 0.9, "a"), _make_det(10.0, 0.9, "a")]
    assert nms_bev_indices(dets, 0.5) == [0]


def test_nms_keeps_disjoint_boxes_in_score_order():
    dets = [_make_det(10.0, 0.2, "a"), _make_det(30.0, 0.9, "a"), _make_det(50.0, 0.5, "a")]
    assert nms_bev_indices(dets, 0.5) == [1, 2, 0]
    assert [d.score for d in nms_bev(dets, 0.5)] == [0.9, 0.5, 0.2]


def test_nms_matches_brute_force(rng):
    for _ in range(100):
        dets = [
            Detection(OrientedBox3D((*rng.uniform(0.0, 8.0, 2), 0.0), (3.9, 1.6, 1.5), rng.uniform(-math.pi, math.pi)), float(rng.uniform()))
            for _ in range(30)
        ]
        assert nms_bev_indices(dets, 0.3) == _brute_force_nms(dets, 0.3)


def test_nms_threshold_must_be_open_interval():
    with pytest.raises(ValidationError):
        nms_bev_indices([], 1.0)
    with pytest.raises(ValidationError):
        nms_bev_indices([], 0.0)


def test_difficulty_levels():
    assert assign_difficulty(_make_gt(10.0, "a", height=50.0)) == "easy"
    assert assign_difficulty(_make_gt(10.0, "a", height=30.0)) == "moderate"
    assert assign_difficulty(_make_gt(10.0, "a", height=30.0, occlusion=2)) == "hard"
    assert assign_difficulty(_make_gt(10.0, "a", height=50.0, truncation=0.4)) == "hard"
    assert assign_difficulty(_make_gt(10.0, "a", height=20.0)) is None
    assert assign_difficulty(_make_gt(10.0, "a", occlusion=3)) is None


def test_difficulty_rules_must_nest():
    with pytest.raises(ValidationError):
        DifficultyRules(min_height=(25.0, 40.0, 25.0))
    with pytest.raises(ValidationError):
        DifficultyRules(max_occlusion=(2, 1, 0))


def test_recall_points():
    assert recall_points("R11").tolist() == [i / 10 for i in range(11)]
    assert recall_points("R40")[0] == 1 / 40
    assert len(recall_points("R40")) == 40
    with pytest.raises(ValidationError):
        recall_points("R20")


def test_ap_on_interleaved_fixture():
    dets, gts = _fixture()
    assert average_precision(dets, gts, mode="R11") == pytest.approx(100.0 * 28.0 / 33.0, abs=1e-9)
    assert average_precision(dets, gts, mode="R40") == pytest.approx(250.0 / 3.0, abs=1e-9)


def test_perfect_detections_score_one_hundred():
    gts = [_make_gt(10.0 + 10 * i, f"{i:06d}") for i in range(4)]
    dets = [Detection(gt.box, 0.5 + 0.1 * i, gt.frame_id) for i, gt in enumerate(gts)]
    assert average_precision(dets, gts) == 100.0
    assert average_precision(dets, gts, mode="R40", iou_kind="bev") == 100.0


def test_no_detections_scores_zero():
    _, gts = _fixture()
    assert average_precision([], gts) == 0.0


def test_ap_without_valid_ground_truth_is_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([], [_make_gt(10.0, "a", height=10.0)])


def test_duplicate_detection_counts_as_false_positive():
    gts = [_make_gt(10.0, "000000")]
    single = average_precision([_make_det(10.0, 0.9, "000000")], gts)
    doubled = average_precision([_make_det(10.0, 0.9, "000000"), _make_det(10.0, 0.95, "000000")], gts)
    assert single == 100.0
    # R11: recall reaches 1 at the top detection, so the duplicate only costs precision beyond it
    assert doubled == 100.0
    trailing_fp_first = average_precision([_make_det(10.0, 0.9, "000000"), _make_det(10.05, 0.95, "000000"), _make_det(40.0, 0.99, "000000")], gts)
    assert trailing_fp_first < 100.0


def test_detection_on_neighbour_class_is_ignored():
    dets, gts = _fixture()
    baseline = average_precision(dets, gts)
    van = _make_gt(50.0, "000003", label="Van")
    with_van = average_precision(dets + [_make_det(50.0, 0.95, "000003")], gts + [van])
    assert with_van == pytest.approx(baseline)


def test_detection_on_harder_gt_is_ignored_at_easy_level():
    gts = [_make_gt(10.0, "000000"), _make_gt(20.0, "000000", height=30.0)]
    dets = [_make_det(10.0, 0.9, "000000"), _make_det(20.0, 0.95, "000000")]
    assert average_precision(dets, gts, level="easy") == 100.0


def test_adding_top_scoring_true_positive_never_lowers_ap():
    dets, gts = _fixture()
    baseline = average_precision(dets, gts)
    improved = average_precision(dets + [_make_det(40.0, 1.0, "000009")], gts + [_make_gt(40.0, "000009")])
    assert improved >= baseline


def test_evaluate_reports_undefined_levels_as_none():
    gts = [_make_gt(10.0, "000000", height=30.0)]
    dets = [_make_det(10.0, 0.9, "000000")]
    results = evaluate(dets, gts)
    assert results["easy"] is None
    assert results["moderate"] == 100.0
    assert results["hard"] == 100.0


def test_ap_lies_in_range(rng):
    gts = [_make_gt(10.0 * i, f"{i % 3:06d}") for i in range(1, 7)]
    for _ in range(20):
        dets = [
            Detection(_make_box(float(rng.uniform(5.0, 65.0))), float(rng.uniform()), f"{int(rng.integers(3)):06d}")
            for _ in range(10)
        ]
        ap = average_precision(dets, gts, iou_kind="bev")
        assert 0.0 <= ap <= 100.0
        assert np.isfinite(ap)


def _dont_care(region, frame_id: str) -> GroundTruth:
    return GroundTruth(None, "DontCare", -1.0, -1, region, dont_care=True, frame_id=frame_id)


def _padded(bbox, pad: float = 10.0):
    left, top, right, bottom = bbox
    return (left - pad, top - pad, right + pad, bottom + pad)


def test_dont_care_overlap_is_share_of_own_area():
    assert dont_care_overlap((0.0, 0.0, 10.0, 10.0), (5.0, 0.0, 20.0, 10.0)) == pytest.approx(0.5)
    assert dont_care_overlap((0.0, 0.0, 10.0, 10.0), (-5.0, -5.0, 15.0, 15.0)) == pytest.approx(1.0)
    assert dont_care_overlap((0.0, 0.0, 10.0, 10.0), (10.0, 0.0, 20.0, 10.0)) == 0.0


def test_unmatched_detection_inside_dont_care_is_ignored(calib):
    stray = Detection(_make_box(25.0, y=5.0), 0.95, "000000")
    gts = [_make_gt(10.0, "000000"), _dont_care(_padded(calib.project_box(stray.box)), "000000")]
    dets = [_make_det(10.0, 0.9, "000000"), stray]
    calibs = {"000000": calib}

    # without a calibration the stray detection outranks the true positive as a false positive
    assert average_precision(dets, gts) == pytest.approx(50.0)
    assert average_precision(dets, gts, calibs=calibs) == 100.0
    assert average_precision(dets, gts, mode="R40", calibs=calibs) == 100.0
    assert evaluate(dets, gts, calibs=calibs)["moderate"] == 100.0


def test_detection_outside_dont_care_stays_false_positive(calib):
    region = _padded(calib.project_box(_make_box(25.0, y=5.0)))
    gts = [_make_gt(10.0, "000000"), _dont_care(region, "000000")]
    dets = [_make_det(10.0, 0.9, "000000"), Detection(_make_box(25.0, y=-5.0), 0.95, "000000")]
    assert average_precision(dets, gts, calibs={"000000": calib}) == pytest.approx(50.0)


def test_dont_care_in_another_frame_does_not_apply(calib):
    stray = Detection(_make_box(25.0, y=5.0), 0.95, "000000")
    gts = [_make_gt(10.0, "000000"), _dont_care(_padded(calib.project_box(stray.box)), "000001")]
    dets = [_make_det(10.0, 0.9, "000000"), stray]
    calibs = {"000000": calib, "000001": calib}
    assert average_precision(dets, gts, calibs=calibs) == pytest.approx(50.0)

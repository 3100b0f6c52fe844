from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import qmc

from dapcd.errors import ValidationError
from dapcd.geometry import (
    Polygon2D,
    bev_intersection,
    bev_iou,
    box_corners,
    clip_convex,
    iou_3d,
    iou_matrix,
    points_in_box,
    polygon_area,
    rotate_box_z,
    rotation_z,
    translate_box,
)
from dapcd.records import OrientedBox3D


def _make_box(x=0.0, y=0.0, z=0.0, l=1.0, w=1.0, h=1.0, yaw=0.0) -> OrientedBox3D:
    return OrientedBox3D((x, y, z), (l, w, h), yaw)


def _random_box(rng, spread: float = 2.0) -> OrientedBox3D:
    return _make_box(
        *rng.uniform(-spread, spread, 2),
        rng.uniform(-0.3, 0.3),
        *rng.uniform(1.0, 4.0, 3),
        rng.uniform(-math.pi, math.pi),
    )


def _sorted_rows(array: np.ndarray) -> np.ndarray:
    return array[np.lexsort(np.round(array, 9).T[::-1])]


def _sampled_ious(a: OrientedBox3D, b: OrientedBox3D, rng, log2_n: int = 20) -> tuple[float, float]:
    """(BEV, 3D) IoU estimates from 2**log2_n scrambled Sobol samples over the union's bounding box."""
    corners = np.vstack([box_corners(a), box_corners(b)])
    unit = qmc.Sobol(d=3, scramble=True, rng=rng).random_base2(log2_n)
    samples = qmc.scale(unit, corners.min(axis=0), corners.max(axis=0))
    inside = []
    for box in (a, b):
        local = np.abs((samples - np.asarray(box.center)) @ rotation_z(box.yaw))
        half = np.asarray(box.size) / 2.0
        footprint = (local[:, 0] <= half[0]) & (local[:, 1] <= half[1])
        inside.append((footprint, footprint & (local[:, 2] <= half[2])))
    (bev_a, solid_a), (bev_b, solid_b) = inside
    # footprints are vertical prisms, so the z coordinate does not bias the BEV ratio
    bev = np.count_nonzero(bev_a & bev_b) / np.count_nonzero(bev_a | bev_b)
    solid_union = np.count_nonzero(solid_a | solid_b)
    return bev, np.count_nonzero(solid_a & solid_b) / solid_union if solid_union else 0.0


def test_unit_cube_corners():
    corners = box_corners(_make_box())
    expected = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    np.testing.assert_allclose(_sorted_rows(corners), _sorted_rows(expected), atol=1e-12)


def test_quarter_turn_of_cube_gives_same_corner_set():
    corners = box_corners(_make_box(yaw=math.pi / 2))
    np.testing.assert_allclose(_sorted_rows(corners), _sorted_rows(box_corners(_make_box())), atol=1e-12)


def test_corners_follow_rotation_and_order():
    box = _make_box(1.0, 2.0, 3.0, l=4.0, w=2.0, h=1.0, yaw=math.pi / 6)
    local = np.array(
        [[2, -1, -0.5], [2, 1, -0.5], [-2, 1, -0.5], [-2, -1, -0.5], [2, -1, 0.5], [2, 1, 0.5], [-2, 1, 0.5], [-2, -1, 0.5]],
        dtype=float,
    )
    expected = local @ rotation_z(math.pi / 6).T + [1.0, 2.0, 3.0]

    corners = box_corners(box)

    np.testing.assert_allclose(corners, expected, atol=1e-12)
    np.testing.assert_allclose(corners.mean(axis=0), box.center, atol=1e-12)


def test_points_in_box_respects_margin():
    box = _make_box(5.0, 1.0, 0.0, l=4.0, w=2.0, h=1.5, yaw=0.3)
    heading = np.array([math.cos(0.3), math.sin(0.3), 0.0])
    center = np.array(box.center)
    just_outside = center + (2.0 + 0.01) * heading
    points = np.vstack([center, just_outside])

    assert points_in_box(points, box).tolist() == [0]
    assert points_in_box(points, box, margin=0.02).tolist() == [0, 1]


def test_points_in_box_matches_half_space_test(rng):
    box = _make_box(0.5, -0.3, 0.2, l=3.0, w=1.5, h=1.2, yaw=0.8)
    corners = box_corners(box)
    ex, ey, ez = corners[0] - corners[3], corners[1] - corners[0], corners[4] - corners[0]
    # (point on face, outward normal)
    faces = [(corners[0], ex), (corners[3], -ex), (corners[1], ey), (corners[0], -ey), (corners[4], ez), (corners[0], -ez)]
    points = rng.uniform(-3.0, 3.0, (1000, 3))
    signed = np.stack([(points - q) @ (n / np.linalg.norm(n)) for q, n in faces], axis=1)
    clear = (np.abs(signed) > 1e-6).all(axis=1)
    expected = np.flatnonzero((signed <= 0.0).all(axis=1) & clear)

    found = points_in_box(points, box)

    assert set(found[clear[found]].tolist()) == set(expected.tolist())


def test_points_in_box_rejects_negative_margin():
    with pytest.raises(ValidationError):
        points_in_box(np.zeros((1, 3)), _make_box(), margin=-0.1)


def test_identical_boxes_have_unit_iou():
    box = _make_box(3.0, -2.0, 0.5, l=4.2, w=1.8, h=1.6, yaw=1.1)
    assert bev_iou(box, box) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(box, box) == pytest.approx(1.0, abs=1e-12)


def test_distant_boxes_have_zero_iou():
    assert bev_iou(_make_box(), _make_box(100.0)) == 0.0
    assert iou_3d(_make_box(), _make_box(100.0)) == 0.0


def test_half_offset_unit_squares_have_third_iou():
    assert bev_iou(_make_box(), _make_box(0.5)) == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_vertical_offset_by_height_has_zero_3d_iou():
    a = _make_box(h=1.5)
    b = _make_box(z=1.5, h=1.5)
    assert bev_iou(a, b) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, b) == 0.0


def test_nested_box_iou_is_volume_ratio():
    outer = _make_box(2.0, 1.0, 0.0, l=4.0, w=2.0, h=2.0, yaw=0.4)
    inner = _make_box(2.0, 1.0, 0.0, l=2.0, w=1.0, h=1.0, yaw=0.4)
    assert iou_3d(outer, inner) == pytest.approx(inner.volume / outer.volume, abs=1e-9)


def test_iou_is_symmetric_bit_for_bit(rng):
    for _ in range(50):
        a, b = _random_box(rng), _random_box(rng)
        assert bev_iou(a, b) == bev_iou(b, a)
        assert iou_3d(a, b) == iou_3d(b, a)


def test_iou_is_invariant_under_rigid_motion(rng):
    for _ in range(50):
        a, b = _random_box(rng), _random_box(rng)
        angle = rng.uniform(-math.pi, math.pi)
        offset = rng.uniform(-10.0, 10.0, 3)
        moved_a = translate_box(rotate_box_z(a, angle), offset)
        moved_b = translate_box(rotate_box_z(b, angle), offset)
        assert iou_3d(moved_a, moved_b) == pytest.approx(iou_3d(a, b), abs=1e-9)
        assert bev_iou(moved_a, moved_b) == pytest.approx(bev_iou(a, b), abs=1e-9)


def test_iou_agrees_with_sampled_estimate(rng):
    checked = 0
    while checked < 200:
        a = _random_box(rng, spread=1.0)
        b = _random_box(rng, spread=1.0)
        exact_bev = bev_iou(a, b)
        if exact_bev == 0.0:
            continue
        estimate_bev, estimate_3d = _sampled_ious(a, b, rng)
        assert exact_bev == pytest.approx(estimate_bev, abs=2e-3)
        assert iou_3d(a, b) == pytest.approx(estimate_3d, abs=2e-3)
        checked += 1


def test_clipped_rectangles_have_at_most_eight_vertices(rng):
    for _ in range(100):
        polygon = bev_intersection(_random_box(rng, 0.5), _random_box(rng, 0.5))
        assert len(polygon) <= 8


def test_clip_square_against_itself_keeps_area():
    square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    assert polygon_area(clip_convex(square, square)) == pytest.approx(1.0)


def test_polygon_needs_three_vertices():
    with pytest.raises(ValidationError):
        Polygon2D(((0.0, 0.0), (1.0, 1.0)))


def test_iou_matrix_shape_and_kind():
    boxes = [_make_box(), _make_box(0.5), _make_box(50.0)]
    matrix = iou_matrix(boxes, boxes[:2], kind="bev")
    assert matrix.shape == (3, 2)
    assert matrix[2].tolist() == [0.0, 0.0]
    with pytest.raises(ValidationError):
        iou_matrix(boxes, boxes, kind="2d")

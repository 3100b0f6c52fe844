"""Oriented box math: corners, containment, BEV clipping, IoU, rigid transforms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .records import OrientedBox3D, PointCloud, normalize_angle

__all__ = [
    "EPSILON",
    "MIN_AREA",
    "Polygon2D",
    "rotation_z",
    "box_corners",
    "bev_polygon",
    "points_in_box",
    "clip_convex",
    "polygon_area",
    "bev_intersection",
    "bev_iou",
    "iou_3d",
    "iou_matrix",
    "rotate_points_z",
    "rotate_box_z",
    "translate_box",
]

# on-edge classification tolerance for clipping, meters
EPSILON = 1e-9
# intersections below this area count as empty
MIN_AREA = 1e-12

# unit corners, bottom face CCW seen from +z, then top face in the same order
_UNIT_CORNERS = np.array(
    [
        [0.5, -0.5, -0.5],
        [0.5, 0.5, -0.5],
        [-0.5, 0.5, -0.5],
        [-0.5, -0.5, -0.5],
        [0.5, -0.5, 0.5],
        [0.5, 0.5, 0.5],
        [-0.5, 0.5, 0.5],
        [-0.5, -0.5, 0.5],
    ]
)


@dataclass(frozen=True, slots=True)
class Polygon2D:
    """Convex polygon with counterclockwise vertices."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.vertices) < 3:
            raise ValidationError("polygon needs at least three vertices")

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box: OrientedBox3D) -> np.ndarray:
    """Return the (8, 3) corners: bottom face CCW, then top face CCW."""
    local = _UNIT_CORNERS * np.asarray(box.size)
    return local @ rotation_z(box.yaw).T + np.asarray(box.center)


def bev_polygon(box: OrientedBox3D) -> Polygon2D:
    corners = box_corners(box)[:4, :2]
    return Polygon2D(tuple((float(x), float(y)) for x, y in corners))


def _xyz(points: PointCloud | np.ndarray) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz
    array = np.asarray(points, dtype=np.float64)
    return array[:, :3] if array.ndim == 2 else array.reshape(-1, 3)


def points_in_box(points: PointCloud | np.ndarray, box: OrientedBox3D, margin: float = 0.0) -> np.ndarray:
    """Indices of points whose box-local coordinates lie within half-size + margin."""
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    xyz = _xyz(points)
    if xyz.shape[0] == 0:
        return np.zeros(0, dtype=np.intp)
    local = (xyz.astype(np.float64) - np.asarray(box.center)) @ rotation_z(box.yaw)
    half = np.asarray(box.size) / 2.0 + margin
    inside = (np.abs(local) <= half).all(axis=1)
    return np.flatnonzero(inside)


def polygon_area(vertices: Sequence[Sequence[float]] | np.ndarray) -> float:
    """Unsigned shoelace area; fewer than three vertices has zero area."""
    pts = np.asarray(vertices, dtype=np.float64)
    if pts.shape[0] < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def _dedupe(vertices: list[tuple[float, float]]) -> list[tuple[float, float]]:
    result: list[tuple[float, float]] = []
    for vertex in vertices:
        if result and abs(vertex[0] - result[-1][0]) <= EPSILON and abs(vertex[1] - result[-1][1]) <= EPSILON:
            continue
        result.append(vertex)
    while len(result) > 1 and abs(result[0][0] - result[-1][0]) <= EPSILON and abs(result[0][1] - result[-1][1]) <= EPSILON:
        result.pop()
    return result


def clip_convex(
    subject: Sequence[tuple[float, float]],
    clip: Sequence[tuple[float, float]],
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of a polygon against a CCW convex polygon."""
    output = list(subject)
    if not output or not clip:
        return []

    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            return []
        edge_x, edge_y = cp2[0] - cp1[0], cp2[1] - cp1[1]
        edge_len = math.hypot(edge_x, edge_y)
        if edge_len <= EPSILON:
            cp1 = cp2
            continue

        inputs = output
        output = []
        s = inputs[-1]
        s_side = _side(s, cp1, edge_x, edge_y, edge_len)
        for e in inputs:
            e_side = _side(e, cp1, edge_x, edge_y, edge_len)
            if e_side >= -EPSILON:
                if s_side < -EPSILON:
                    output.append(_intersect(s, e, s_side, e_side))
                output.append(e)
            elif s_side >= -EPSILON:
                output.append(_intersect(s, e, s_side, e_side))
            s, s_side = e, e_side
        output = _dedupe(output)
        cp1 = cp2
    return output


def _side(
    p: tuple[float, float],
    origin: tuple[float, float],
    edge_x: float,
    edge_y: float,
    edge_len: float,
) -> float:
    # signed distance to the edge line, positive on the inner (left) side
    return (edge_x * (p[1] - origin[1]) - edge_y * (p[0] - origin[0])) / edge_len


def _intersect(
    s: tuple[float, float],
    e: tuple[float, float],
    s_side: float,
    e_side: float,
) -> tuple[float, float]:
    denom = s_side - e_side
    if denom == 0.0:
        return e
    t = s_side / denom
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def bev_intersection(a: OrientedBox3D, b: OrientedBox3D) -> list[tuple[float, float]]:
    return clip_convex(bev_polygon(a).vertices, bev_polygon(b).vertices)


def _canonical_pair(a: OrientedBox3D, b: OrientedBox3D) -> tuple[OrientedBox3D, OrientedBox3D]:
    # fixed argument order makes iou(a, b) == iou(b, a) bit for bit
    return (a, b) if a.as_row() <= b.as_row() else (b, a)


def _bev_overlap_area(a: OrientedBox3D, b: OrientedBox3D) -> float:
    # cheap circumscribed-circle rejection before clipping
    ra = math.hypot(a.size[0], a.size[1]) / 2.0
    rb = math.hypot(b.size[0], b.size[1]) / 2.0
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > ra + rb:
        return 0.0
    area = polygon_area(bev_intersection(a, b))
    return area if area >= MIN_AREA else 0.0


def bev_iou(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Bird's-eye-view IoU of two boxes in [0, 1]."""
    a, b = _canonical_pair(a, b)
    inter = _bev_overlap_area(a, b)
    if inter == 0.0:
        return 0.0
    union = bev_polygon(a).area + bev_polygon(b).area - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Volumetric IoU of two upright boxes in [0, 1]."""
    a, b = _canonical_pair(a, b)
    bottom = max(a.center[2] - a.size[2] / 2.0, b.center[2] - b.size[2] / 2.0)
    top = min(a.center[2] + a.size[2] / 2.0, b.center[2] + b.size[2] / 2.0)
    height = top - bottom
    if height <= 0.0:
        return 0.0
    inter_area = _bev_overlap_area(a, b)
    if inter_area == 0.0:
        return 0.0
    inter = inter_area * height
    # footprint areas from the same shoelace sum keep identical boxes at exactly 1.0
    union = bev_polygon(a).area * a.size[2] + bev_polygon(b).area * b.size[2] - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_matrix(
    boxes_a: Sequence[OrientedBox3D],
    boxes_b: Sequence[OrientedBox3D],
    kind: str = "3d",
) -> np.ndarray:
    if kind not in ("3d", "bev"):
        raise ValidationError(f"unknown IoU kind {kind!r}")
    fn = iou_3d if kind == "3d" else bev_iou
    result = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            result[i, j] = fn(a, b)
    return result


def rotate_points_z(xyz: np.ndarray, angle: float) -> np.ndarray:
    return np.asarray(xyz, dtype=np.float64) @ rotation_z(angle).T


def rotate_box_z(box: OrientedBox3D, angle: float) -> OrientedBox3D:
    """Rotate a box about the sensor z axis (center and heading)."""
    center = rotation_z(angle) @ np.asarray(box.center)
    return OrientedBox3D(tuple(center), box.size, normalize_angle(box.yaw + angle))


def translate_box(box: OrientedBox3D, offset: Sequence[float]) -> OrientedBox3D:
    center = tuple(c + float(o) for c, o in zip(box.center, offset))
    return OrientedBox3D(center, box.size, box.yaw)

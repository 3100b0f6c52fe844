"""Bit-exact KITTI velodyne, label, calibration and detection file handling."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from loguru import logger

from .errors import (
    MalformedFileError,
    MalformedRowError,
    MissingFieldError,
    ParseError,
    ValidationError,
)
from .geometry import box_corners
from .records import Detection, GroundTruth, OrientedBox3D, PointCloud, normalize_angle
from .utils import read_text

__all__ = [
    "POINT_DTYPE",
    "ROTATION_TOLERANCE",
    "MIN_PROJECTION_DEPTH",
    "Calibration",
    "canonical_calibration",
    "read_velodyne",
    "write_velodyne",
    "read_calibration",
    "write_calibration",
    "read_labels",
    "write_labels",
    "camera_to_lidar_box",
    "box_to_camera",
    "read_detections",
    "write_detections",
]

PathLike = str | os.PathLike[str]

# little-endian float32 x, y, z, reflectance
POINT_DTYPE = np.dtype("<f4")
_RECORD_BYTES = 4 * POINT_DTYPE.itemsize
ROTATION_TOLERANCE = 1e-3
# corners behind the image plane are pinned to this depth (m)
MIN_PROJECTION_DEPTH = 0.1
_LABEL_COLUMNS = 15
_DONT_CARE = "DontCare"


@dataclass(frozen=True, slots=True)
class Calibration:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def __post_init__(self) -> None:
        shapes = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}
        for name, shape in shapes.items():
            matrix = np.array(getattr(self, name), dtype=np.float64)
            if matrix.shape != shape:
                raise ValidationError(f"{name} must have shape {shape}, got {matrix.shape}")
            if not np.isfinite(matrix).all():
                raise ValidationError(f"{name} contains non-finite values")
            matrix.flags.writeable = False
            object.__setattr__(self, name, matrix)
        _check_orthonormal("R0_rect", self.R0_rect)
        _check_orthonormal("Tr_velo_to_cam rotation", self.Tr_velo_to_cam[:, :3])

    @property
    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous transform R0_rect · Tr_velo_to_cam."""
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        return r0 @ tr

    def velo_to_cam(self, xyz: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        transform = self.velo_to_rect
        return pts @ transform[:3, :3].T + transform[:3, 3]

    def cam_to_velo(self, xyz: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        inverse = np.linalg.inv(self.velo_to_rect)
        return pts @ inverse[:3, :3].T + inverse[:3, 3]

    def project_box(self, box: OrientedBox3D) -> tuple[float, float, float, float]:
        """Unclipped image bounds (left, top, right, bottom) of the box corners under P2."""
        cam = self.velo_to_cam(box_corners(box))
        image = np.column_stack([cam, np.ones(len(cam))]) @ self.P2.T
        depth = np.maximum(image[:, 2], MIN_PROJECTION_DEPTH)
        u, v = image[:, 0] / depth, image[:, 1] / depth
        return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def _check_orthonormal(name: str, rotation: np.ndarray) -> None:
    deviation = np.abs(rotation @ rotation.T - np.eye(3)).max()
    if not deviation <= ROTATION_TOLERANCE:
        raise ValidationError(f"{name} is not orthonormal (max deviation {deviation:.2e})")


def canonical_calibration() -> Calibration:
    """KITTI axis convention without offsets: camera (x, y, z) = LiDAR (-y, -z, x)."""
    tr = np.zeros((3, 4))
    tr[:, :3] = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
    p2 = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return Calibration(P2=p2, R0_rect=np.eye(3), Tr_velo_to_cam=tr)


# ----------------------------------------------------------------------
# Velodyne scans
# ----------------------------------------------------------------------
def read_velodyne(path: PathLike) -> PointCloud:
    """Read a KITTI .bin scan of little-endian float32 (x, y, z, r) records."""
    scan_path = Path(path)
    size = scan_path.stat().st_size
    if size % _RECORD_BYTES:
        raise MalformedFileError(f"{scan_path}: size {size} is not a multiple of {_RECORD_BYTES} bytes")

    points = np.fromfile(scan_path, dtype=POINT_DTYPE).reshape(-1, 4)
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        index = int(np.flatnonzero(~finite)[0])
        raise ParseError(f"{scan_path}: non-finite value in point {index}")

    reflectance = points[:, 3]
    out_of_range = (reflectance < 0.0) | (reflectance > 1.0)
    if out_of_range.any():
        # only touch offending values so in-range bits stay untouched
        logger.debug("Clamping {} reflectance values in {}", int(out_of_range.sum()), scan_path.name)
        reflectance[out_of_range] = np.clip(reflectance[out_of_range], 0.0, 1.0)

    return PointCloud(points, frame_id=scan_path.stem)


def write_velodyne(path: PathLike, cloud: PointCloud) -> None:
    scan_path = Path(path)
    scan_path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(cloud.points, dtype=POINT_DTYPE).tofile(scan_path)


# ----------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------
_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def read_calibration(path: PathLike) -> Calibration:
    calib_path = Path(path)
    values: dict[str, np.ndarray] = {}
    for line_number, line in enumerate(read_text(calib_path).splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, payload = line.partition(":")
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        try:
            numbers = np.array([float(token) for token in payload.split()], dtype=np.float64)
        except ValueError as exc:
            raise MalformedRowError(f"{key}: {exc}", line_number) from exc
        if not np.isfinite(numbers).all():
            raise MalformedRowError(f"{key}: non-finite value", line_number)
        rows, cols = _CALIB_KEYS[key]
        if numbers.size != rows * cols:
            raise MalformedRowError(f"{key} needs {rows * cols} values, got {numbers.size}", line_number)
        values[key] = numbers.reshape(rows, cols)

    for key in _CALIB_KEYS:
        if key not in values:
            raise MissingFieldError(key, str(calib_path))
    return Calibration(**values)


def write_calibration(path: PathLike, calib: Calibration) -> None:
    calib_path = Path(path)
    calib_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{key}: " + " ".join(f"{value:.12e}" for value in getattr(calib, key).ravel())
        for key in _CALIB_KEYS
    ]
    calib_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# Labels
# ----------------------------------------------------------------------
def camera_to_lidar_box(
    dimensions: Sequence[float],
    location: Sequence[float],
    rotation_y: float,
    calib: Calibration,
) -> OrientedBox3D:
    """Convert a camera-frame label (h, w, l / bottom-center / ry) to a LiDAR centroid box."""
    h, w, l = (float(v) for v in dimensions)
    x, y, z = (float(v) for v in location)
    # camera y points down, so the centroid sits h/2 above the bottom face
    centroid = calib.cam_to_velo([x, y - h / 2.0, z])[0]
    yaw = normalize_angle(-rotation_y - math.pi / 2.0)
    return OrientedBox3D(tuple(centroid), (l, w, h), yaw)


def box_to_camera(box: OrientedBox3D, calib: Calibration) -> tuple[tuple[float, float, float], tuple[float, float, float], float]:
    """Inverse of camera_to_lidar_box: ((h, w, l), bottom-center location, ry)."""
    l, w, h = box.size
    x, y, z = calib.velo_to_cam(box.center)[0]
    rotation_y = normalize_angle(-box.yaw - math.pi / 2.0)
    return (h, w, l), (float(x), float(y + h / 2.0), float(z)), rotation_y


def read_labels(path: PathLike, calib: Calibration) -> list[GroundTruth]:
    label_path = Path(path)
    frame_id = label_path.stem
    records: list[GroundTruth] = []
    for line_number, line in enumerate(read_text(label_path).splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != _LABEL_COLUMNS:
            raise MalformedRowError(f"expected {_LABEL_COLUMNS} columns, got {len(tokens)}", line_number)
        try:
            numbers = [float(token) for token in tokens[1:]]
        except ValueError as exc:
            raise MalformedRowError(str(exc), line_number) from exc
        if not all(math.isfinite(value) for value in numbers):
            raise MalformedRowError("non-finite value", line_number)
        records.append(_label_row(tokens[0], numbers, calib, frame_id, line_number))
    return records


def _label_row(
    class_label: str,
    numbers: list[float],
    calib: Calibration,
    frame_id: str,
    line_number: int,
) -> GroundTruth:
    truncation, occlusion, alpha = numbers[0], numbers[1], numbers[2]
    bbox2d = tuple(numbers[3:7])
    if class_label == _DONT_CARE:
        return GroundTruth(
            box=None,
            class_label=class_label,
            truncation=truncation,
            occlusion=int(occlusion),
            bbox2d=bbox2d,
            alpha=alpha,
            dont_care=True,
            frame_id=frame_id,
        )
    try:
        box = camera_to_lidar_box(numbers[7:10], numbers[10:13], numbers[13], calib)
        return GroundTruth(
            box=box,
            class_label=class_label,
            truncation=truncation,
            occlusion=int(occlusion),
            bbox2d=bbox2d,
            alpha=alpha,
            frame_id=frame_id,
        )
    except ValidationError as exc:
        raise MalformedRowError(str(exc), line_number) from exc


def write_labels(path: PathLike, gts: Iterable[GroundTruth], calib: Calibration) -> None:
    label_path = Path(path)
    label_path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for gt in gts:
        left, top, right, bottom = gt.bbox2d
        if gt.dont_care or gt.box is None:
            dims, loc, ry = (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0
        else:
            dims, loc, ry = box_to_camera(gt.box, calib)
        values = [gt.truncation, gt.occlusion, gt.alpha, left, top, right, bottom, *dims, *loc, ry]
        lines.append(gt.class_label + " " + " ".join(_format_value(v) for v in values))
    label_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _format_value(value: float) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


# ----------------------------------------------------------------------
# Detections
# ----------------------------------------------------------------------
def read_detections(path: PathLike) -> list[Detection]:
    """One detection per line: score x y z l w h yaw (LiDAR frame)."""
    det_path = Path(path)
    detections: list[Detection] = []
    for line_number, line in enumerate(read_text(det_path).splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 8:
            raise MalformedRowError(f"expected 8 columns, got {len(tokens)}", line_number)
        try:
            detections.append(Detection.from_row([float(t) for t in tokens], frame_id=det_path.stem))
        except (ValueError, ValidationError) as exc:
            raise MalformedRowError(str(exc), line_number) from exc
    return detections


def write_detections(path: PathLike, detections: Iterable[Detection]) -> None:
    det_path = Path(path)
    det_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [" ".join(repr(float(v)) for v in det.as_row()) for det in detections]
    det_path.write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")

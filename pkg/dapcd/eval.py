"""KITTI-style detection evaluation: NMS, difficulty buckets and interpolated AP."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from loguru import logger

from .errors import UndefinedMetricError, ValidationError
from .geometry import bev_iou, iou_3d
from .kitti_io import Calibration
from .records import Detection, GroundTruth

__all__ = [
    "LEVELS",
    "AP_MODES",
    "NEIGHBOUR_CLASSES",
    "DONT_CARE_OVERLAP",
    "DifficultyRules",
    "nms_bev_indices",
    "nms_bev",
    "assign_difficulty",
    "dont_care_overlap",
    "recall_points",
    "average_precision",
    "evaluate",
]

LEVELS = ("easy", "moderate", "hard")
AP_MODES = ("R11", "R40")
# gts of these classes are ignored (neither TP nor FN) when evaluating the key class
NEIGHBOUR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}
# detections whose image box lies more than this share inside a DontCare region are ignored
DONT_CARE_OVERLAP = 0.5


@dataclass(frozen=True, slots=True)
class DifficultyRules:
    min_height: tuple[float, float, float] = (40.0, 25.0, 25.0)
    max_occlusion: tuple[int, int, int] = (0, 1, 2)
    max_truncation: tuple[float, float, float] = (0.15, 0.30, 0.50)

    def __post_init__(self) -> None:
        for name in ("min_height", "max_occlusion", "max_truncation"):
            if len(getattr(self, name)) != len(LEVELS):
                raise ValidationError(f"{name} needs one value per level")
        h, o, t = self.min_height, self.max_occlusion, self.max_truncation
        if any(b > a for a, b in zip(h, h[1:])):
            raise ValidationError(f"min heights must not increase across levels: {h}")
        if any(b < a for a, b in zip(o, o[1:])) or any(b < a for a, b in zip(t, t[1:])):
            raise ValidationError("occlusion and truncation limits must not decrease across levels")

    @classmethod
    def from_config(cls, config) -> "DifficultyRules":
        return cls(
            tuple(config.difficulty_min_height),
            tuple(config.difficulty_max_occlusion),
            tuple(config.difficulty_max_truncation),
        )

    def passes(self, gt: GroundTruth, level: str) -> bool:
        i = _level_index(level)
        return (
            gt.height_px >= self.min_height[i]
            and gt.occlusion <= self.max_occlusion[i]
            and gt.truncation <= self.max_truncation[i]
        )


def _level_index(level: str) -> int:
    try:
        return LEVELS.index(level)
    except ValueError:
        raise ValidationError(f"unknown difficulty {level!r}") from None


def nms_bev_indices(dets: Sequence[Detection], iou_threshold: float) -> list[int]:
    """Greedy BEV NMS; returns kept positions in descending score order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValidationError(f"NMS threshold must lie in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(bev_iou(dets[i].box, dets[k].box) <= iou_threshold for k in kept):
            kept.append(i)
    return kept


def nms_bev(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    return [dets[i] for i in nms_bev_indices(dets, iou_threshold)]


def assign_difficulty(gt: GroundTruth, rules: DifficultyRules | None = None) -> str | None:
    """Easiest level whose thresholds the gt meets, or None."""
    rules = rules or DifficultyRules()
    if gt.dont_care:
        return None
    for level in LEVELS:
        if rules.passes(gt, level):
            return level
    return None


def recall_points(mode: str) -> np.ndarray:
    if mode == "R11":
        return np.arange(11) / 10.0
    if mode == "R40":
        return np.arange(1, 41) / 40.0
    raise ValidationError(f"unknown AP mode {mode!r}")


def _iou_fn(kind: str):
    if kind == "3d":
        return iou_3d
    if kind == "bev":
        return bev_iou
    raise ValidationError(f"unknown IoU kind {kind!r}")


@dataclass(slots=True)
class _FrameGts:
    valid: list[GroundTruth] = field(default_factory=list)
    ignored: list[GroundTruth] = field(default_factory=list)
    dont_care: list[tuple[float, float, float, float]] = field(default_factory=list)


def _split_gts(
    gts: Iterable[GroundTruth],
    level: str,
    rules: DifficultyRules,
    class_label: str,
) -> dict[str, _FrameGts]:
    """Per frame: valid and ignored gts for one class and level, plus DontCare regions."""
    neighbours = NEIGHBOUR_CLASSES.get(class_label, ())
    frames: dict[str, _FrameGts] = defaultdict(_FrameGts)
    for gt in gts:
        frame = frames[gt.frame_id]
        if gt.dont_care:
            frame.dont_care.append(gt.bbox2d)
        elif gt.box is None:
            continue
        elif gt.class_label == class_label:
            (frame.valid if rules.passes(gt, level) else frame.ignored).append(gt)
        elif gt.class_label in neighbours:
            frame.ignored.append(gt)
    return frames


def dont_care_overlap(
    bbox: tuple[float, float, float, float],
    region: tuple[float, float, float, float],
) -> float:
    """Share of bbox's area that lies inside a DontCare region."""
    width = min(bbox[2], region[2]) - max(bbox[0], region[0])
    height = min(bbox[3], region[3]) - max(bbox[1], region[1])
    area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
    if width <= 0.0 or height <= 0.0 or area <= 0.0:
        return 0.0
    return width * height / area


def _in_dont_care(det: Detection, frame: _FrameGts, calib: Calibration | None) -> bool:
    if not frame.dont_care or calib is None:
        return False
    bbox = calib.project_box(det.box)
    return any(dont_care_overlap(bbox, region) > DONT_CARE_OVERLAP for region in frame.dont_care)


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.7,
    level: str = "moderate",
    mode: str = "R11",
    iou_kind: str = "3d",
    rules: DifficultyRules | None = None,
    class_label: str = "Car",
    calibs: Mapping[str, Calibration] | None = None,
) -> float:
    """AP in [0, 100] from greedy score-ordered matching.

    Detections matched to ignored gts count neither as TP nor FP; unmatched
    valid gts are the false negatives. With a calibration for the frame, an
    unmatched detection whose image box lies mostly inside a DontCare region
    is ignored too.
    """
    rules = rules or DifficultyRules()
    calibs = calibs or {}
    iou = _iou_fn(iou_kind)
    points = recall_points(mode)
    frames = _split_gts(gts, level, rules, class_label)
    n_valid = sum(len(frame.valid) for frame in frames.values())
    if n_valid == 0:
        raise UndefinedMetricError(f"no valid {class_label} ground truth at level {level!r}")

    by_frame: dict[str, list[tuple[int, Detection]]] = defaultdict(list)
    for index, det in enumerate(dets):
        by_frame[det.frame_id].append((index, det))

    scored: list[tuple[float, str, int, bool]] = []
    for frame_id, frame_dets in by_frame.items():
        frame = frames.get(frame_id, _FrameGts())
        valid, ignored = frame.valid, frame.ignored
        valid_used = [False] * len(valid)
        ignored_used = [False] * len(ignored)
        for index, det in sorted(frame_dets, key=lambda item: (-item[1].score, item[0])):
            best, best_iou = -1, iou_threshold
            for j, gt in enumerate(valid):
                if valid_used[j]:
                    continue
                overlap = iou(det.box, gt.box)
                if overlap >= best_iou and (best < 0 or overlap > best_iou):
                    best, best_iou = j, overlap
            if best >= 0:
                valid_used[best] = True
                scored.append((det.score, frame_id, index, True))
                continue
            hit = next(
                (j for j, gt in enumerate(ignored) if not ignored_used[j] and iou(det.box, gt.box) >= iou_threshold),
                None,
            )
            if hit is not None:
                ignored_used[hit] = True
                continue
            if _in_dont_care(det, frame, calibs.get(frame_id)):
                continue
            scored.append((det.score, frame_id, index, False))

    if not scored:
        return 0.0
    scored.sort(key=lambda item: (-item[0], item[1], item[2]))
    hits = np.array([tp for *_, tp in scored], dtype=np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_valid
    precision = tp / (tp + fp)

    interpolated = [precision[recall >= r].max() if (recall >= r).any() else 0.0 for r in points]
    return float(np.mean(interpolated) * 100.0)


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.7,
    mode: str = "R11",
    iou_kind: str = "3d",
    rules: DifficultyRules | None = None,
    class_label: str = "Car",
    calibs: Mapping[str, Calibration] | None = None,
) -> dict[str, float | None]:
    """AP per difficulty; a level without valid gts reports None."""
    results: dict[str, float | None] = {}
    for level in LEVELS:
        try:
            results[level] = average_precision(
                dets, gts, iou_threshold, level, mode, iou_kind, rules, class_label, calibs
            )
        except UndefinedMetricError as exc:
            logger.warning("AP undefined: {}", exc)
            results[level] = None
    return results

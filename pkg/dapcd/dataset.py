"""KITTI directory discovery and lazy scan iteration."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Iterator

from loguru import logger

from .errors import MissingFieldError, ValidationError
from .kitti_io import read_velodyne
from .records import PointCloud
from .utils import read_text

__all__ = [
    "VELODYNE_DIR",
    "LABEL_DIR",
    "CALIB_DIR",
    "find_kitti_roots",
    "resolve_kitti_root",
    "load_split",
    "list_frames",
    "frame_paths",
    "classify_scan_candidates",
    "iter_clouds",
]

VELODYNE_DIR = "velodyne"
LABEL_DIR = "label_2"
CALIB_DIR = "calib"


def _is_kitti_root(path: Path) -> bool:
    if not path.is_dir():
        return False
    return (path / VELODYNE_DIR).is_dir()


def find_kitti_roots(base_dir: os.PathLike[str] | str) -> list[str]:
    """Return directories (base itself or up to two levels below) holding velodyne/."""
    base_path = Path(base_dir)
    if not base_path.exists():
        return []

    candidates: list[str] = []
    if _is_kitti_root(base_path):
        candidates.append(str(base_path.resolve()))

    for item_path in base_path.iterdir():
        if not item_path.is_dir():
            continue
        if _is_kitti_root(item_path):
            candidates.append(str(item_path.resolve()))
        try:
            for sub_item in item_path.iterdir():
                if _is_kitti_root(sub_item):
                    candidates.append(str(sub_item.resolve()))
        except PermissionError:
            continue

    return sorted(set(candidates))


def resolve_kitti_root(path: os.PathLike[str] | str) -> Path:
    """The single KITTI root at or up to two levels below path."""
    base_path = Path(path)
    if _is_kitti_root(base_path):
        return base_path
    roots = find_kitti_roots(base_path)
    if not roots:
        raise MissingFieldError(VELODYNE_DIR, str(base_path))
    if len(roots) > 1:
        raise ValidationError(f"several KITTI roots under {base_path}: {', '.join(roots)}")
    logger.info("Using KITTI root {}", roots[0])
    return Path(roots[0])


def load_split(path: os.PathLike[str] | str) -> list[str]:
    """Read an ImageSets-style split file: one frame id per line."""
    split_path = Path(path)
    if not split_path.exists():
        raise FileNotFoundError(f"split file not found: {split_path}")
    lines = read_text(split_path).splitlines()
    return [line.strip() for line in lines if line.strip()]


def list_frames(root: os.PathLike[str] | str, split_file: os.PathLike[str] | str | None = None) -> list[str]:
    """Frame ids under root, restricted to a split when given."""
    velodyne = Path(root) / VELODYNE_DIR
    if not velodyne.is_dir():
        raise MissingFieldError(VELODYNE_DIR, str(root))
    available = sorted(p.stem for p in velodyne.glob("*.bin"))
    if split_file is None:
        return available
    wanted = load_split(split_file)
    present = set(available)
    missing = [frame for frame in wanted if frame not in present]
    if missing:
        logger.warning("{} split frames have no scan (first: {})", len(missing), missing[0])
    return [frame for frame in wanted if frame in present]


def frame_paths(root: os.PathLike[str] | str, frame_id: str) -> dict[str, Path]:
    base = Path(root)
    return {
        "velodyne": base / VELODYNE_DIR / f"{frame_id}.bin",
        "label": base / LABEL_DIR / f"{frame_id}.txt",
        "calib": base / CALIB_DIR / f"{frame_id}.txt",
    }


def classify_scan_candidates(paths: Iterable[os.PathLike[str] | str]) -> tuple[list[str], list[tuple[str, str]]]:
    """Return loadable scans plus (path, reason) tuples for anything we skip."""
    valid: list[str] = []
    issues: list[tuple[str, str]] = []

    for candidate in paths:
        path = Path(candidate)
        reason: str | None = None

        if not path.exists():
            reason = "file not found"
        elif not path.is_file():
            reason = "not a regular file"
        else:
            try:
                size = path.stat().st_size
                if size % 16:
                    reason = f"size {size} is not a multiple of 16 bytes"
            except OSError as exc:
                reason = f"cannot stat file: {exc}"

        if reason:
            issues.append((str(path), reason))
        else:
            valid.append(str(path))

    return valid, issues


def iter_clouds(root: os.PathLike[str] | str, frames: Iterable[str] | None = None) -> Iterator[PointCloud]:
    """Lazily read scans; unreadable candidates are logged and skipped."""
    frame_ids = list(frames) if frames is not None else list_frames(root)
    scans = [frame_paths(root, frame)["velodyne"] for frame in frame_ids]
    valid, issues = classify_scan_candidates(scans)
    for path, reason in issues:
        logger.warning("Skipping {}: {}", path, reason)
    for path in valid:
        yield read_velodyne(path)

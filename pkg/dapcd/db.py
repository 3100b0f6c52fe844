"""On-disk GT database: one velodyne binary per entry plus a JSON index."""
from __future__ import annotations

import json
import os
from pathlib import Path

from loguru import logger

from .augmentation import GtDatabase, GtEntry
from .config import get_data_dir
from .errors import MalformedFileError, MissingFieldError
from .kitti_io import read_velodyne, write_velodyne
from .records import GroundTruth, OrientedBox3D, PointCloud
from .utils import read_text

__all__ = ["INDEX_NAME", "POINTS_DIR", "default_db_root", "save_gt_database", "load_gt_database"]

INDEX_NAME = "index.json"
POINTS_DIR = "points"
_FORMAT_VERSION = 1
_REQUIRED = ("file", "frame_id", "class_label", "box", "num_points")


def default_db_root() -> Path:
    return get_data_dir() / "gt_database"


def _resolve_root(root: str | os.PathLike[str] | None) -> Path:
    return Path(root) if root is not None else default_db_root()


def _entry_record(entry: GtEntry, file_name: str) -> dict[str, object]:
    gt = entry.gt
    return {
        "file": file_name,
        "frame_id": gt.frame_id,
        "class_label": gt.class_label,
        "box": list(entry.box.as_row()),
        "truncation": gt.truncation,
        "occlusion": gt.occlusion,
        "bbox2d": list(gt.bbox2d),
        "alpha": gt.alpha,
        "num_points": len(entry.points),
    }


def save_gt_database(db: GtDatabase, root: str | os.PathLike[str] | None = None) -> Path:
    """Write every entry under root/points and the index to root/index.json."""
    db_root = _resolve_root(root)
    points_dir = db_root / POINTS_DIR
    points_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for number, entry in enumerate(db):
        file_name = f"{entry.source_frame or 'scene'}_{entry.gt.class_label}_{number:05d}.bin"
        write_velodyne(points_dir / file_name, entry.points)
        records.append(_entry_record(entry, file_name))

    index_path = db_root / INDEX_NAME
    index_path.write_text(
        json.dumps({"version": _FORMAT_VERSION, "entries": records}, indent=2),
        encoding="utf-8",
    )
    logger.info("Saved GT database with {} entries to {}", len(records), db_root)
    return index_path


def load_gt_database(root: str | os.PathLike[str] | None = None) -> GtDatabase:
    db_root = _resolve_root(root)
    index_path = db_root / INDEX_NAME
    if not index_path.exists():
        raise FileNotFoundError(f"GT database index not found: {index_path}")
    try:
        index = json.loads(read_text(index_path))
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{index_path}: {exc}") from exc
    if "entries" not in index:
        raise MissingFieldError("entries", str(index_path))

    entries: list[GtEntry] = []
    for record in index["entries"]:
        for key in _REQUIRED:
            if key not in record:
                raise MissingFieldError(key, str(index_path))
        cloud = read_velodyne(db_root / POINTS_DIR / record["file"])
        if len(cloud) != int(record["num_points"]):
            raise MalformedFileError(
                f"{record['file']}: expected {record['num_points']} points, found {len(cloud)}"
            )
        gt = GroundTruth(
            box=OrientedBox3D.from_row(record["box"]),
            class_label=record["class_label"],
            truncation=float(record.get("truncation", 0.0)),
            occlusion=int(record.get("occlusion", 0)),
            bbox2d=tuple(record.get("bbox2d", (0.0, 0.0, 1.0, 1.0))),
            alpha=float(record.get("alpha", 0.0)),
            frame_id=record["frame_id"],
        )
        entries.append(GtEntry(gt, PointCloud(cloud.points, record["frame_id"])))

    logger.debug("Loaded {} GT database entries from {}", len(entries), db_root)
    return GtDatabase(tuple(entries))

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from loguru import logger

from .errors import MalformedFileError

__all__ = ["read_text", "format_float", "write_table_csv", "to_jsonable", "dump_json", "SeedLike", "make_rng"]


def read_text(path: str | os.PathLike[str]) -> str:
    """UTF-8 file contents; undecodable bytes raise MalformedFileError."""
    text_path = Path(path)
    try:
        return text_path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFileError(f"{text_path}: not valid UTF-8 text (byte {exc.start})") from exc


def format_float(value: float, digits: int = 6) -> str:
    """Format a number for CSV storage without trailing zeros."""
    text = f"{value:.{digits}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if text in ("", "-0"):
        return "0"
    return text


def write_table_csv(
    path: str | os.PathLike[str],
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
) -> Path:
    """Write a plot-ready table; floats are formatted with format_float."""
    table_path = Path(path)
    table_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with table_path.open("w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
            count += 1
    logger.debug("Wrote {} rows to {}", count, table_path)
    return table_path


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into plain JSON types."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def dump_json(value: Any) -> str:
    return json.dumps(to_jsonable(value), indent=2, sort_keys=True)


SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def make_rng(seed: SeedLike = None) -> np.random.Generator:
    """One seeding entry point; a Generator passes through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

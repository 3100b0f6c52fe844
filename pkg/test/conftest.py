from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from dapcd.kitti_io import canonical_calibration
from dapcd.synthetic import SyntheticSceneSpec, generate_dataset, generate_scene


@pytest.fixture()
def data_dir(tmp_path, monkeypatch):
    """Point PCD_DATA_DIR at a temporary directory."""

    path = tmp_path / "data"
    path.mkdir()
    monkeypatch.setenv("PCD_DATA_DIR", str(path))
    yield path


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


@pytest.fixture()
def calib():
    return canonical_calibration()


@pytest.fixture()
def synthetic_scene():
    return generate_scene(SyntheticSceneSpec(), seed=7, frame_id="000007")


@pytest.fixture()
def scene_root(tmp_path):
    """A three-frame synthetic KITTI tree."""

    root = tmp_path / "kitti"
    generate_dataset(root, 3, seed=3)
    return root


@pytest.fixture()
def kitti_root():
    value = os.environ.get("PCD_KITTI_ROOT")
    if not value or not Path(value).is_dir():
        pytest.skip("PCD_KITTI_ROOT not set")
    return Path(value)

"""Shared fixtures: a small deterministic synthetic dataset on disk."""

import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from cap3d.fixture import FixtureSpec, generate_fixture
from cap3d.kitti_io import FrameDataset


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory) -> pathlib.Path:
    root = tmp_path_factory.mktemp("dataset")
    generate_fixture(root, FixtureSpec(num_frames=20, seed=0))
    return root


@pytest.fixture(scope="session")
def dataset(fixture_root) -> FrameDataset:
    return FrameDataset.from_split_file(fixture_root, fixture_root / "split.txt")


@pytest.fixture(scope="session")
def gts_by_frame(dataset):
    return {fid: dataset.read_labels(fid) for fid in dataset.frame_ids}

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dynsplat.dataset import Dataset
from dynsplat.synth import AnalyticScene, Blob, write_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training tests")


ZERO3 = [0.0, 0.0, 0.0]


def mini_scene() -> AnalyticScene:
    """One moving white blob; enough for trainer plumbing tests."""
    return AnalyticScene(
        name="mini",
        aabb=[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        blobs=[
            Blob(
                segment_id=1,
                color=(0.9, 0.9, 0.9),
                center_poly=[[-0.15, 0.0, 0.05], [0.3, 0.0, -0.1], ZERO3, ZERO3],
                radius_poly=[0.22, 0.0, 0.0, 0.0],
                peak_density=40.0,
            )
        ],
    )


def static_white_scene() -> AnalyticScene:
    return AnalyticScene(
        name="white",
        aabb=[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        blobs=[
            Blob(
                segment_id=1,
                color=(0.95, 0.95, 0.95),
                center_poly=[[0.0, 0.0, 0.0], ZERO3, ZERO3, ZERO3],
                radius_poly=[0.3, 0.0, 0.0, 0.0],
                peak_density=50.0,
            )
        ],
    )


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("mini_ds")
    write_dataset(mini_scene(), root, n_views=6, n_test_views=3, n_timesteps=2, width=32, height=32)
    return Dataset(root)


@pytest.fixture(scope="session")
def white_dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("white_ds")
    write_dataset(static_white_scene(), root, n_views=4, n_test_views=2, n_timesteps=1, width=32, height=32)
    return Dataset(root)


@pytest.fixture(scope="session")
def demo_dataset(tmp_path_factory) -> Dataset:
    """blobs3 scene at service-test scale (fewer views, 32x32)."""
    from dynsplat.synth import blobs3

    root = tmp_path_factory.mktemp("demo_ds")
    write_dataset(blobs3(), root, n_views=6, n_test_views=2, n_timesteps=2, width=32, height=32)
    return Dataset(root)


@pytest.fixture(scope="session")
def blobs3_dataset(tmp_path_factory) -> Dataset:
    from dynsplat.synth import blobs3

    root = tmp_path_factory.mktemp("blobs3_ds")
    write_dataset(blobs3(), root, n_views=20, n_test_views=10, n_timesteps=5, width=64, height=64)
    return Dataset(root)


@pytest.fixture()
def rng() -> np.random.RandomState:
    return np.random.RandomState(0)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)

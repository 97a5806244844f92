import numpy as np
import pytest

import settings
from pcno.datagen import grid_triangles
from pcno.geometry import PointCloudSample, preprocess_sample
from pcno.pydantic_models import PreprocessConfig


def pytest_collection_modifyitems(config, items):
    if settings.RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason="set PCNO_RUN_SLOW=1 to run desk-scale checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_chain(n_nodes, seed=0, length=1.0, d_a=1, uniform=False, label="chain"):
    rng = np.random.default_rng(seed)
    if uniform:
        nodes = np.linspace(0.0, length, n_nodes)
    else:
        nodes = np.sort(rng.uniform(0.0, length, n_nodes)) + np.arange(n_nodes) * 1e-3
    a = rng.standard_normal((n_nodes, d_a))
    u = np.sin(2.0 * np.pi * nodes / nodes.max())[:, None] + 1.5
    return PointCloudSample.from_cells(nodes, [(i, i + 1) for i in range(n_nodes - 1)], 1, 1, a, u, label=label)


def make_grid(n, seed=0, label=None):
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])
    a = rng.standard_normal((n * n, 1))
    u = (np.sin(np.pi * nodes[:, 0]) * np.sin(np.pi * nodes[:, 1]) + 0.5)[:, None]
    return PointCloudSample.from_cells(nodes, grid_triangles(n), 2, 2, a, u, label=label or f"grid{n}")


@pytest.fixture
def chain_factory():
    return make_chain


@pytest.fixture
def grid_factory():
    return make_grid


@pytest.fixture
def chain_sample():
    return preprocess_sample(make_chain(24, seed=3), PreprocessConfig(intrinsic_dim=1))


@pytest.fixture
def grid_sample():
    return preprocess_sample(make_grid(6, seed=4), PreprocessConfig(intrinsic_dim=2))


@pytest.fixture
def chain_dataset():
    """Preprocessed chains of varying size, for batching and training tests."""
    config = PreprocessConfig(intrinsic_dim=1)
    return [preprocess_sample(make_chain(n, seed=i, label=("short" if n < 20 else "long")), config)
            for i, n in enumerate([12, 17, 22, 25, 14, 19])]

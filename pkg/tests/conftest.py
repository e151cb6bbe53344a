import os
from pathlib import Path

import numpy as np
import pytest

from app import database
from app.kernel_core import cached_lookup

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def unit_rows(rng):
    """Factory for random unit-norm inputs."""

    def make(count: int, dim: int = 5) -> np.ndarray:
        x = rng.standard_normal((count, dim))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    return make


@pytest.fixture(scope="session")
def coarse_table():
    """A small lookup table, fast to build, for tests that only need some table."""
    return cached_lookup(0.3, 257)


@pytest.fixture
def ledger_url(tmp_path, monkeypatch):
    url = f"sqlite:///{tmp_path / 'ledger.db'}"
    monkeypatch.setenv("SPARSE_NNGP_DATABASE_URL", url)
    monkeypatch.setattr(database, "_engine", None)
    return url


def _find(directory: Path, stem: str):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


@pytest.fixture
def mnist_paths():
    root = os.getenv("SPARSE_NNGP_MNIST_DIR")
    if not root:
        pytest.skip("SPARSE_NNGP_MNIST_DIR is not set")
    paths = [_find(Path(root), stem) for stem in MNIST_FILES]
    if any(p is None for p in paths):
        pytest.skip(f"MNIST IDX files not found in {root}")
    return paths

import numpy as np
import pytest

from safepool.store import gen_synthetic


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Fast dataset for unit tests: 4 classes, small pools."""
    root = tmp_path_factory.mktemp("smallset")
    return gen_synthetic(root, n_classes=4, pool_per_class=10, height=5,
                         width=5, channels=32, embed_dim=16, parts=8,
                         noise=0.5, seed=11, test_per_class=8)


@pytest.fixture(scope="session")
def pinned_dataset(tmp_path_factory):
    """The pinned benchmark fixture used by the acceptance suite."""
    root = tmp_path_factory.mktemp("pinnedset")
    return gen_synthetic(root, n_classes=10, pool_per_class=20, height=7,
                         width=7, channels=64, embed_dim=32, parts=16,
                         noise=0.5, seed=7)


def rel_err(a, b, floor=1e-6):
    """Relative error with an absolute floor, robust to true-zero gradients."""
    return abs(a - b) / max(abs(a) + abs(b), floor)

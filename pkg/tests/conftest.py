import os

import pytest

from lottalora.data import load_mnist


def mnist_data_dir():
    """Resolve the MNIST IDX directory from the environment, if present."""
    path = os.environ.get("LOTTALORA_DATA_DIR")
    if path and os.path.isdir(path):
        return path
    return None


requires_mnist = pytest.mark.skipif(
    mnist_data_dir() is None,
    reason="MNIST IDX files not found; set LOTTALORA_DATA_DIR (see README)",
)


@pytest.fixture(scope="session")
def mnist_dir():
    path = mnist_data_dir()
    if path is None:
        pytest.skip("MNIST IDX files not found; set LOTTALORA_DATA_DIR (see README)")
    return path


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return load_mnist(mnist_dir)

import numpy as np
import pytest

from memaudit.core import Dataset, ImageRecord


def image(values, channels=1, height=None, width=None, id="img", source=None):
    """ImageRecord from a nested or flat value list."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 3:
        channels, height, width = arr.shape
    elif arr.ndim == 2:
        channels, (height, width) = 1, arr.shape
    elif height is None:
        height, width = 1, arr.size // channels
    return ImageRecord(id, channels, height, width, arr.reshape(-1), source)


def random_dataset(n, shape, seed, role="train", name="ds", scale=255.0):
    """Dataset of uniform-noise images (numpy RNG: test fixture only)."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    images = [
        ImageRecord(
            f"{name}_{i:04d}", c, h, w,
            (rng.random(c * h * w) * scale).astype(np.float32),
        )
        for i in range(n)
    ]
    return Dataset(name, role, tuple(images))


@pytest.fixture
def tiny_image():
    return image([1.0, 2.0, 3.0], id="tiny")

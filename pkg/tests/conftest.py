import random

import numpy as np
import pytest

from tiffgen import build_tiff, gradient_image


@pytest.fixture
def rgb_image():
    return gradient_image(300, 200, channels=3, seed=11)


@pytest.fixture
def gray_image():
    return gradient_image(210, 140, channels=1, seed=7)


@pytest.fixture
def two_level_tiff(tmp_path, rgb_image):
    """A classic two-level tiled TIFF file on disk (raw tiles)."""
    half = rgb_image[::2, ::2]  # any smaller image works as level 1
    data = build_tiff(
        [rgb_image, half],
        tile=(64, 64),
        description="Demo scan|AppMag = 40|MPP = 0.25",
    )
    path = tmp_path / "demo.tif"
    path.write_bytes(data)
    return path, rgb_image, half


@pytest.fixture
def make_rng():
    return lambda seed: random.Random(seed)

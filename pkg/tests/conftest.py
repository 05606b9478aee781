import numpy as np
import pytest

from fundustrack.imaging import FundusImage


def solid_rgb(w: int, h: int, color=(0, 0, 0)) -> FundusImage:
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:, :] = color
    return FundusImage.from_array(px)


def disk_rgb(w: int, h: int, cx: float, cy: float, r: float,
             color=(255, 255, 255), background=(0, 0, 0)) -> FundusImage:
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:, :] = background
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    px[inside] = color
    return FundusImage.from_array(px)


def synthetic_fundus(size: int = 128) -> FundusImage:
    """Bright circular field of view with a few dark curvy vessels.

    Deterministic; used across pipeline, service, and CLI tests.
    """
    px = np.zeros((size, size, 3), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    c = size / 2
    fov = (xx - c) ** 2 + (yy - c) ** 2 <= (0.45 * size) ** 2
    px[fov] = (190, 140, 110)

    vessels = np.zeros((size, size), dtype=bool)
    # horizontal vessel with a sine wiggle
    for x in range(int(0.15 * size), int(0.85 * size)):
        y = int(c + 0.08 * size * np.sin(2 * np.pi * (x - 0.15 * size) / (0.45 * size)))
        vessels[max(y - 1, 0):y + 2, x] = True
    # diagonal branch
    for t in range(int(0.3 * size)):
        x, y = int(0.3 * size) + t, int(0.35 * size) + t
        if 0 <= x < size and 0 <= y < size:
            vessels[y, max(x - 1, 0):x + 2] = True
    vessels &= fov
    px[vessels] = (70, 35, 35)
    return FundusImage.from_array(px)


@pytest.fixture
def fundus_fixture() -> FundusImage:
    return synthetic_fundus(128)

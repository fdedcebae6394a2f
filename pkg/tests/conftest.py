import numpy as np
import pytest

from astrogan.colorspace import ImageGrid, Space


def blob_image(seed: int, height: int = 64, width: int = 64, blobs: int = 4) -> ImageGrid:
    """Dark field with a few colored Gaussian blobs, loosely like a nebula crop."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:height, :width]
    img = np.zeros((height, width, 3))
    for _ in range(blobs):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.08, 0.25) * min(height, width)
        color = rng.uniform(0.2, 1.0, 3)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None] * color
    img = img / img.max() * 255.0
    return ImageGrid(np.rint(img), Space.SRGB_8BIT)


@pytest.fixture
def blobs():
    return blob_image


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

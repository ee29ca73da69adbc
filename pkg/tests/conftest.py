from __future__ import annotations

import numpy as np
import pytest

from ramk.codebook import Codebook
from ramk.features_io import ImageFeatures, RegionBox


def make_features(
    rng: np.random.Generator,
    m: int,
    d: int,
    width: int = 64,
    height: int = 48,
    boxes: list[RegionBox] | None = None,
    image_id: str = "img",
) -> ImageFeatures:
    """Random valid feature set with positions strictly inside the image."""
    return ImageFeatures(
        image_id=image_id,
        vectors=rng.normal(0, 1, size=(m, d)).astype(np.float32),
        positions=np.stack(
            [
                rng.uniform(0, width - 1e-3, size=m),
                rng.uniform(0, height - 1e-3, size=m),
            ],
            axis=1,
        ).astype(np.float32),
        scales=rng.uniform(0.5, 8.0, size=m).astype(np.float32),
        attentions=rng.uniform(0.0, 300.0, size=m).astype(np.float32),
        boxes=list(boxes or []),
        width=width,
        height=height,
    )


def make_codebook(rng: np.random.Generator, c: int, d: int) -> Codebook:
    return Codebook(centroids=rng.normal(0, 1, size=(c, d)).astype(np.float32))


def random_boxes(rng: np.random.Generator, n: int, width: int, height: int) -> list[RegionBox]:
    boxes = []
    for _ in range(n):
        x0 = rng.uniform(0, width * 0.6)
        y0 = rng.uniform(0, height * 0.6)
        x1 = rng.uniform(x0 + 2, width)
        y1 = rng.uniform(y0 + 2, height)
        boxes.append(RegionBox(float(x0), float(y0), float(x1), float(y1), float(rng.uniform(0, 1))))
    return boxes


@pytest.fixture(scope="session")
def session_rng() -> np.random.Generator:
    return np.random.default_rng(20240607)

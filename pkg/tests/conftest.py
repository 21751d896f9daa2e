"""Shared synthetic fixtures for siftsup tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from siftsup.imgproc import GrayImage, gray_to_rgb, write_image
from siftsup.sift import DESCRIPTOR_SIZE, Keypoint


def textured_array(
    height: int, width: int, seed: int = 0, n_blobs: int | None = None, margin: int = 8
) -> np.ndarray:
    """Random bright/dark Gaussian blobs on a mid-gray field, flat within *margin* of the border."""
    rng = np.random.default_rng(seed)
    if n_blobs is None:
        n_blobs = max(10, (height - 2 * margin) * (width - 2 * margin) // 120)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    field = np.full((height, width), 0.5)
    for _ in range(n_blobs):
        cy = rng.uniform(margin + 6, height - margin - 6)
        cx = rng.uniform(margin + 6, width - margin - 6)
        sigma = rng.uniform(1.5, 4.0)
        amp = rng.uniform(0.15, 0.35) * rng.choice([-1.0, 1.0])
        field += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma * sigma))
    return np.clip(field, 0.0, 1.0)


def blob_array(height: int = 128, width: int = 128, cx: float = 64.0, cy: float = 64.0, sigma: float = 4.0):
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma * sigma))


def keypoint(x: float, y: float, size: float = 4.0, orientation: float = 0.0, seed: int = 0) -> Keypoint:
    desc = np.random.default_rng(seed).random(DESCRIPTOR_SIZE)
    return Keypoint(x, y, size, orientation, 1.0, 0, desc / np.linalg.norm(desc))


@pytest.fixture
def texture():
    return lambda height=128, width=96, seed=0, **kw: GrayImage(textured_array(height, width, seed, **kw))


@pytest.fixture
def blob():
    return GrayImage(blob_array())


@pytest.fixture
def make_kp():
    return keypoint


@pytest.fixture
def write_dataset(tmp_path: Path):
    """Write a cloth/ + image/ dataset; each sample is (stem, garment array, person array)."""

    def _write(samples, root: Path | None = None) -> Path:
        root = root or tmp_path / "dataset"
        (root / "cloth").mkdir(parents=True, exist_ok=True)
        (root / "image").mkdir(parents=True, exist_ok=True)
        for stem, garment, person in samples:
            if garment is not None:
                write_image(gray_to_rgb(GrayImage(garment)), root / "cloth" / f"{stem}.png")
            if person is not None:
                write_image(gray_to_rgb(GrayImage(person)), root / "image" / f"{stem}.png")
        return root

    return _write

"""Synthetic image corpora for the adapter tests.

Scenes are a color gradient with a few solid rectangles plus mild pixel
noise: enough structure for the models to latch onto, cheap to render.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

SIZE = 64


def draw_scene(rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    c0 = rng.uniform(0, 255, 3)
    c1 = rng.uniform(0, 255, 3)
    t = np.linspace(0.0, 1.0, size)[None, :, None]
    img = np.broadcast_to(c0 * (1 - t) + c1 * t, (size, size, 3)).copy()
    for _ in range(int(rng.integers(2, 5))):
        x0 = int(rng.integers(0, size - 8))
        y0 = int(rng.integers(0, size - 8))
        w = int(rng.integers(4, size // 2))
        h = int(rng.integers(4, size // 2))
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0, 255, 3)
    img += rng.normal(0.0, 2.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def write_scene(path: Path, seed: int, size: int = SIZE) -> Path:
    rng = np.random.default_rng(seed)
    Image.fromarray(draw_scene(rng, size)).save(path)
    return path


def write_noise(path: Path, seed: int, size: int = SIZE) -> Path:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(pixels).save(path)
    return path


def write_blank(path: Path, size: int = SIZE, value: int = 127) -> Path:
    pixels = np.full((size, size, 3), value, dtype=np.uint8)
    Image.fromarray(pixels).save(path)
    return path


def build_corpus(root: Path, count: int, prefix: str = "img", seed0: int = 0) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        write_scene(root / f"{prefix}{i:03d}.png", seed0 + i)
    return root


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory) -> Path:
    """The 100-image collection shared by the slower training tests."""
    return build_corpus(tmp_path_factory.mktemp("collection"), 100)


@pytest.fixture(scope="session")
def toy_queries(tmp_path_factory) -> Path:
    return build_corpus(tmp_path_factory.mktemp("queries"), 6, prefix="q", seed0=1000)

"""Image decoding shared by every adapter.

Ids are file stems, order is sorted filename order, and all randomness
goes through explicit seeds, so repeated runs on the same directory
produce identical batches.
"""

from __future__ import annotations

import random
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import NoUsableImages, UndecodableImage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def list_images(image_dir: str | Path) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise NoUsableImages(f"{root} is not a directory")
    return sorted(
        p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_image(path: str | Path, size: int | None) -> torch.Tensor:
    """Decode to a float32 CHW tensor in [0, 1], RGB.

    ``size`` bilinear-resizes to a square; None keeps source dimensions.
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if size is not None:
                rgb = rgb.resize((size, size), Image.BILINEAR)
    except Exception as e:  # PIL raises a zoo of types for bad bytes
        raise UndecodableImage(f"{path}: {e}") from e
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_corpus(
    image_dir: str | Path, size: int, skip_bad: bool = False
) -> tuple[list[str], torch.Tensor, list[str]]:
    """All images in a directory as (ids, NCHW batch, skipped paths).

    With ``skip_bad`` undecodable files are dropped with a warning and
    returned in the skipped list; otherwise the first bad file raises.
    """
    ids, tensors, skipped = [], [], []
    for path in list_images(image_dir):
        try:
            tensors.append(load_image(path, size))
        except UndecodableImage as e:
            if not skip_bad:
                raise
            warnings.warn(f"skipping undecodable image {path}: {e}")
            skipped.append(str(path))
            continue
        ids.append(path.stem)
    if not ids:
        raise NoUsableImages(f"no decodable images under {image_dir}")
    return ids, torch.stack(tensors), skipped


def write_sidecar(out_path: str | Path, skipped: Sequence[str]) -> Path:
    """One skipped path per line next to the main artifact."""
    side = Path(str(out_path) + ".skipped.log")
    side.write_text("".join(f"{p}\n" for p in skipped), encoding="utf-8")
    return side

"""Object detection for the pre-retrieval object statistics.

Runs a Faster R-CNN with a ResNet-50 FPN backbone over the query images
and records the surviving box sizes in the detections format the engine
reads. Box coordinates are mapped back to the original image scale by
torchvision, so widths and heights are in source pixels.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import torch
from torchvision.models import detection as tvdet

from qpp.io import Box, DetectionFile, write_detections

from .errors import MissingWeights
from .imaging import list_images, load_image, seed_all


def build_detector(
    weights: str | Path | None = None,
    num_classes: int = 91,
    min_size: int = 256,
    max_size: int = 512,
    seed: int = 0,
) -> torch.nn.Module:
    if weights is not None and not Path(weights).is_file():
        raise MissingWeights(f"detector checkpoint not found: {weights}")
    seed_all(seed)
    model = tvdet.fasterrcnn_resnet50_fpn(
        weights=None,
        weights_backbone=None,
        num_classes=num_classes,
        min_size=min_size,
        max_size=max_size,
    )
    if weights is not None:
        model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    model.eval()
    return model


def filter_boxes(
    boxes: Iterable[tuple[float, float, float, float]],
    scores: Iterable[float],
    score_threshold: float,
) -> tuple[Box, ...]:
    """Threshold by confidence and drop degenerate geometry.

    The engine's loader rejects non-positive or non-finite sides, so
    anything the detector emits with zero area is discarded here.
    """
    kept = []
    for (x1, y1, x2, y2), s in zip(boxes, scores):
        if s < score_threshold:
            continue
        w, h = float(x2 - x1), float(y2 - y1)
        if not (0.0 < w < float("inf") and 0.0 < h < float("inf")):
            continue
        kept.append(Box(w, h))
    return tuple(kept)


def detect_boxes(
    queries_dir: str | Path,
    out_path: str | Path,
    weights: str | Path | None = None,
    score_threshold: float = 0.5,
    min_size: int = 256,
    max_size: int = 512,
    seed: int = 0,
) -> Path:
    """Detect objects in every query image and write the detections file."""
    model = build_detector(weights, min_size=min_size, max_size=max_size, seed=seed)
    per_query: dict[str, tuple[Box, ...]] = {}
    for path in list_images(queries_dir):
        img = load_image(path, size=None)
        # a constant image carries no objects; skip the detector entirely
        # instead of reporting whatever an (possibly untrained) net imagines
        if torch.all(img == img.flatten()[0]):
            per_query[path.stem] = ()
            continue
        with torch.no_grad():
            (pred,) = model([img])
        per_query[path.stem] = filter_boxes(
            pred["boxes"].tolist(), pred["scores"].tolist(), score_threshold
        )
    out = Path(out_path)
    write_detections(DetectionFile(boxes=per_query), out)
    return out

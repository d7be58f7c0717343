"""Retrieval backbones: ResNet trunk + generalized-mean pooling.

Both shipped backbone names use the same architecture and differ only in
which fine-tuned weights they load; with no weights file the trunk keeps
its seeded random initialization, which is enough for format-level work
but obviously not for real retrieval.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torchvision import models

from qpp.core import EmbeddingStore
from qpp.io import write_embeddings_binary

from .errors import MissingWeights
from .imaging import load_corpus, seed_all, write_sidecar

BACKBONES = ("gem_sfm", "gem_aploss")
DEFAULT_ARCH = "resnet101"


class GeM(nn.Module):
    """Generalized-mean pooling: avg(x^p)^(1/p) with learnable p."""

    def __init__(self, p: float = 3.0, eps: float = 1e-6):
        super().__init__()
        self.p = nn.Parameter(torch.full((1,), float(p)))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.clamp(min=self.eps).pow(self.p)
        return x.mean(dim=(-2, -1)).pow(1.0 / self.p)


class GemBackbone(nn.Module):
    def __init__(self, arch: str = DEFAULT_ARCH):
        super().__init__()
        ctor = getattr(models, arch, None)
        if ctor is None:
            raise MissingWeights(f"unknown torchvision architecture {arch!r}")
        trunk = ctor(weights=None)
        self.features = nn.Sequential(*list(trunk.children())[:-2])
        self.pool = GeM()
        self.dim = trunk.fc.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x))


def build_backbone(
    backbone: str = "gem_sfm",
    arch: str = DEFAULT_ARCH,
    weights: str | Path | None = None,
    seed: int = 0,
) -> GemBackbone:
    if backbone not in BACKBONES:
        raise MissingWeights(f"unknown backbone {backbone!r}; have {BACKBONES}")
    if weights is not None and not Path(weights).is_file():
        raise MissingWeights(f"weights file {weights} not found")
    seed_all(seed)
    model = GemBackbone(arch)
    if weights is not None:
        state: Mapping[str, torch.Tensor] = torch.load(
            weights, map_location="cpu", weights_only=True
        )
        model.load_state_dict(state)
    model.eval()
    return model


def extract_embeddings(
    image_dir: str | Path,
    out_path: str | Path,
    backbone: str = "gem_sfm",
    arch: str = DEFAULT_ARCH,
    weights: str | Path | None = None,
    image_size: int = 224,
    batch_size: int = 16,
    seed: int = 0,
) -> Path:
    """One L2-normalized descriptor per decodable image, binary format.

    Undecodable files are skipped with a warning and listed, one path per
    line, in ``<out_path>.skipped.log`` (written even when empty).
    """
    model = build_backbone(backbone, arch, weights, seed)
    ids, batch, skipped = load_corpus(image_dir, image_size, skip_bad=True)

    chunks = []
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunks.append(model(batch[start : start + batch_size]))
    vecs = torch.cat(chunks).double().numpy()
    # GeM clamps activations at eps > 0, so every row norm is positive
    vecs = (vecs / np.linalg.norm(vecs, axis=1, keepdims=True)).astype(np.float32)

    store = EmbeddingStore.create(ids, vecs, normalized=True)
    out = Path(out_path)
    write_embeddings_binary(store, out)
    write_sidecar(out, skipped)
    return out

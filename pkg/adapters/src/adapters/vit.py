"""Fine-tuned visual transformer that regresses query performance.

Supervised: needs effectiveness targets for the training queries. The
learning rate and batch size are grid-searched on a held-out slice of the
training queries, then the winning configuration is retrained on all of
them. Defaults match the full-size setup (patch 16, dim 768, depth 12);
tests shrink everything.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import nn

from qpp.core import Orientation, PredictorOutput
from qpp.io import write_scores

from .errors import MissingTargets
from .imaging import load_corpus, seed_all

DEFAULT_LRS = (1e-2, 1e-3, 1e-4)
DEFAULT_BATCH_SIZES = (8, 16, 32)


class ViTRegressor(nn.Module):
    """Class-token transformer with a single-output regression head."""

    def __init__(
        self,
        image_size: int = 224,
        patch: int = 16,
        dim: int = 768,
        depth: int = 12,
        heads: int = 12,
    ):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        n_patches = (image_size // patch) ** 2
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.zeros(1, n_patches + 1, dim))
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=4 * dim,
            batch_first=True,
            norm_first=True,
        )
        # nested-tensor fast path is incompatible with norm_first anyway
        self.blocks = nn.TransformerEncoder(
            layer, num_layers=depth, enable_nested_tensor=False
        )
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 1)
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.cls, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(x).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls.expand(x.shape[0], -1, -1), tokens], dim=1)
        tokens = self.blocks(tokens + self.pos)
        return self.head(self.norm(tokens[:, 0])).squeeze(-1)


def _fit(
    images: torch.Tensor,
    targets: torch.Tensor,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    arch: dict,
) -> ViTRegressor:
    seed_all(seed)
    model = ViTRegressor(**arch)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.MSELoss()
    gen = torch.Generator().manual_seed(seed)
    model.train()
    n = images.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            loss = loss_fn(model(images[idx]), targets[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


def _predict(model: ViTRegressor, images: torch.Tensor, batch_size: int = 32) -> list[float]:
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out.extend(float(v) for v in model(images[start : start + batch_size]))
    return out


def vit_scores(
    train_dir: str | Path,
    targets: Mapping[str, float],
    test_dir: str | Path,
    out_path: str | Path,
    image_size: int = 224,
    epochs: int = 100,
    lrs: Sequence[float] = DEFAULT_LRS,
    batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES,
    val_fraction: float = 0.2,
    seed: int = 0,
    **arch,
) -> Path:
    """Grid-search, retrain on all training queries, score the test queries."""
    arch = {"image_size": image_size, **arch}
    train_ids, train_images, _ = load_corpus(train_dir, image_size)
    missing = [q for q in train_ids if q not in targets]
    if missing:
        raise MissingTargets(f"no target for training queries {missing[:5]!r}")
    y = torch.tensor([targets[q] for q in train_ids], dtype=torch.float32)

    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(train_ids), generator=gen)
    n_val = max(1, int(round(len(train_ids) * val_fraction)))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    if fit_idx.numel() == 0:
        raise MissingTargets("not enough training queries to hold out a validation slice")

    best = None
    for lr in lrs:
        for batch_size in batch_sizes:
            model = _fit(
                train_images[fit_idx], y[fit_idx], epochs, lr, batch_size, seed, arch
            )
            preds = torch.tensor(_predict(model, train_images[val_idx]))
            val_mse = float(((preds - y[val_idx]) ** 2).mean())
            if best is None or val_mse < best[0]:
                best = (val_mse, lr, batch_size)

    _, lr, batch_size = best
    final = _fit(train_images, y, epochs, lr, batch_size, seed, arch)
    test_ids, test_images, _ = load_corpus(test_dir, image_size)
    out = PredictorOutput(
        name="vit_finetuned",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores=dict(zip(test_ids, _predict(final, test_images))),
    )
    path = Path(out_path)
    write_scores(out, path)
    return path

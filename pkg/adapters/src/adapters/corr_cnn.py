"""CNN regressor over engine-emitted per-query similarity matrices.

Reads the binary matrix artifact the engine writes, trains on queries
with known effectiveness, and writes predicted performance for every
matrix in the file. Three convolutional-pooling blocks and two dense
layers; adaptive pooling decouples the dense layers from the matrix side
length so the same model handles any top-k cutoff.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from qpp.core import Orientation, PredictorOutput
from qpp.io import load_similarity_matrices, write_scores

from .errors import MissingTargets
from .imaging import seed_all

DEFAULT_LRS = (1e-2, 1e-3, 1e-4)
DEFAULT_BATCH_SIZES = (8, 16, 32)


class CorrelationCNN(nn.Module):
    def __init__(self, channels: tuple[int, int, int] = (16, 32, 64), hidden: int = 64):
        super().__init__()
        widths = (1,) + tuple(channels)
        blocks = []
        for cin, cout in zip(widths, widths[1:]):
            blocks += [
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.dense = nn.Sequential(
            nn.Linear(channels[-1] * 4, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.pool(self.blocks(x)).flatten(1)
        return self.dense(feats).squeeze(-1)


def _as_batch(matrices: Mapping[str, np.ndarray], order: Sequence[str]) -> torch.Tensor:
    stacked = np.stack([matrices[q] for q in order]).astype(np.float32)
    return torch.from_numpy(stacked).unsqueeze(1)


def _fit(
    x: torch.Tensor, y: torch.Tensor, epochs: int, lr: float, batch_size: int, seed: int
) -> CorrelationCNN:
    seed_all(seed)
    model = CorrelationCNN()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.MSELoss()
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(x.shape[0], generator=gen)
        for start in range(0, x.shape[0], batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


def cnn_scores(
    matrix_path: str | Path,
    targets: Mapping[str, float],
    out_path: str | Path,
    epochs: int = 100,
    lrs: Sequence[float] = DEFAULT_LRS,
    batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> Path:
    """Train on the queries present in ``targets``; score every matrix.

    Queries without targets are scored but never trained on, so a
    held-out evaluation only needs to omit them from the mapping.
    """
    matrices, _meta = load_similarity_matrices(matrix_path)
    train_ids = sorted(q for q in matrices if q in targets)
    if not train_ids:
        raise MissingTargets("no matrix id has a target value")
    x = _as_batch(matrices, train_ids)
    y = torch.tensor([targets[q] for q in train_ids], dtype=torch.float32)

    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(train_ids), generator=gen)
    n_val = max(1, int(round(len(train_ids) * val_fraction)))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    if fit_idx.numel() == 0:
        raise MissingTargets("not enough targeted queries to hold out a validation slice")

    best = None
    for lr in lrs:
        for batch_size in batch_sizes:
            model = _fit(x[fit_idx], y[fit_idx], epochs, lr, batch_size, seed)
            with torch.no_grad():
                val_mse = float(((model(x[val_idx]) - y[val_idx]) ** 2).mean())
            if best is None or val_mse < best[0]:
                best = (val_mse, lr, batch_size)

    _, lr, batch_size = best
    final = _fit(x, y, epochs, lr, batch_size, seed)
    all_ids = sorted(matrices)
    with torch.no_grad():
        preds = final(_as_batch(matrices, all_ids))
    out = PredictorOutput(
        name="correlation_cnn",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores={q: float(p) for q, p in zip(all_ids, preds)},
    )
    path = Path(out_path)
    write_scores(out, path)
    return path

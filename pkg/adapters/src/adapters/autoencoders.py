"""Reconstruction-error query scores from denoising or masked autoencoders.

Both models are trained on the collection and score a query by how badly
they reconstruct it, so higher is harder. The shipped architectures are
the full-size ones (masked: 18 encoder blocks at dim 768 with 16 heads,
8 decoder blocks at dim 512); tests shrink every knob.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from qpp.core import Orientation, PredictorOutput
from qpp.io import write_scores

from .imaging import load_corpus, seed_all

AE_KINDS = ("denoising", "masked")


class DenoisingAE(nn.Module):
    """Four conv layers down (ReLU + BatchNorm2d), four up with nearest upsampling."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        widths = [3, c, 2 * c, 4 * c, 8 * c]
        enc = []
        for cin, cout in zip(widths, widths[1:]):
            enc += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.BatchNorm2d(cout),
            ]
        self.encoder = nn.Sequential(*enc)
        dec = []
        for cin, cout in zip(widths[::-1], widths[::-1][1:]):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, cout, 3, padding=1),
            ]
            dec.append(nn.ReLU(inplace=True) if cout != 3 else nn.Sigmoid())
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def _block(dim: int, heads: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d_model=dim,
        nhead=heads,
        dim_feedforward=4 * dim,
        batch_first=True,
        norm_first=True,
    )


class MaskedAE(nn.Module):
    """Patch transformer that reconstructs pixels of masked-out patches."""

    def __init__(
        self,
        image_size: int = 224,
        patch: int = 16,
        enc_dim: int = 768,
        enc_depth: int = 18,
        heads: int = 16,
        dec_dim: int = 512,
        dec_depth: int = 8,
    ):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        self.patch = patch
        self.n_patches = (image_size // patch) ** 2
        self.embed = nn.Conv2d(3, enc_dim, kernel_size=patch, stride=patch)
        self.enc_pos = nn.Parameter(torch.zeros(1, self.n_patches, enc_dim))
        self.encoder = nn.ModuleList(_block(enc_dim, heads) for _ in range(enc_depth))
        self.enc_norm = nn.LayerNorm(enc_dim)
        self.to_dec = nn.Linear(enc_dim, dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dec_dim))
        self.dec_pos = nn.Parameter(torch.zeros(1, self.n_patches, dec_dim))
        self.decoder = nn.ModuleList(_block(dec_dim, heads) for _ in range(dec_depth))
        self.dec_norm = nn.LayerNorm(dec_dim)
        self.head = nn.Linear(dec_dim, 3 * patch * patch)
        nn.init.normal_(self.enc_pos, std=0.02)
        nn.init.normal_(self.dec_pos, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        p = self.patch
        x = x.reshape(n, c, h // p, p, w // p, p)
        return x.permute(0, 2, 4, 3, 5, 1).reshape(n, self.n_patches, -1)

    def forward(
        self, x: torch.Tensor, mask_ratio: float, gen: torch.Generator
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (per-patch reconstruction, per-patch target, mask).

        mask is 1 where the patch was hidden from the encoder; the loss and
        the query score are computed over those patches only.
        """
        n = x.shape[0]
        tokens = self.embed(x).flatten(2).transpose(1, 2) + self.enc_pos
        n_keep = max(1, int(round(self.n_patches * (1.0 - mask_ratio))))
        noise = torch.rand(n, self.n_patches, generator=gen)
        shuffle = noise.argsort(dim=1)
        keep = shuffle[:, :n_keep]
        mask = torch.ones(n, self.n_patches, device=x.device)
        mask.scatter_(1, keep, 0.0)

        visible = torch.gather(
            tokens, 1, keep.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
        )
        for block in self.encoder:
            visible = block(visible)
        visible = self.enc_norm(visible)

        dec_tokens = self.mask_token.expand(n, self.n_patches, -1).clone()
        dec_tokens.scatter_(
            1,
            keep.unsqueeze(-1).expand(-1, -1, dec_tokens.shape[-1]),
            self.to_dec(visible),
        )
        dec_tokens = dec_tokens + self.dec_pos
        for block in self.decoder:
            dec_tokens = block(dec_tokens)
        recon = self.head(self.dec_norm(dec_tokens))
        return recon, self.patchify(x), mask


@dataclass
class TrainedAE:
    kind: str
    model: nn.Module
    image_size: int
    mask_ratio: float
    noise_std: float
    seed: int


def train_ae(
    images: torch.Tensor,
    kind: str = "denoising",
    image_size: int = 224,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 12,
    noise_std: float = 0.2,
    mask_ratio: float = 0.75,
    seed: int = 0,
    **arch,
) -> TrainedAE:
    if kind not in AE_KINDS:
        raise ValueError(f"kind must be one of {AE_KINDS}, got {kind!r}")
    seed_all(seed)
    if kind == "denoising":
        model: nn.Module = DenoisingAE(**arch)
    else:
        model = MaskedAE(image_size=image_size, **arch)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.MSELoss()
    gen = torch.Generator().manual_seed(seed)

    model.train()
    n = images.shape[0]
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            batch = images[perm[start : start + batch_size]]
            opt.zero_grad()
            if kind == "denoising":
                noisy = batch + noise_std * torch.randn(batch.shape, generator=gen)
                loss = loss_fn(model(noisy), batch)
            else:
                recon, target, mask = model(batch, mask_ratio, gen)
                per_patch = ((recon - target) ** 2).mean(dim=-1)
                loss = (per_patch * mask).sum() / mask.sum()
            loss.backward()
            opt.step()
    model.eval()
    return TrainedAE(kind, model, image_size, mask_ratio, noise_std, seed)


def reconstruction_mse(trained: TrainedAE, images: torch.Tensor) -> list[float]:
    """Per-image MSE under a fixed evaluation seed, so scores are stable."""
    gen = torch.Generator().manual_seed(trained.seed + 1)
    out = []
    with torch.no_grad():
        for i in range(images.shape[0]):
            one = images[i : i + 1]
            if trained.kind == "denoising":
                noisy = one + trained.noise_std * torch.randn(one.shape, generator=gen)
                mse = ((trained.model(noisy) - one) ** 2).mean()
            else:
                recon, target, mask = trained.model(one, trained.mask_ratio, gen)
                per_patch = ((recon - target) ** 2).mean(dim=-1)
                mse = (per_patch * mask).sum() / mask.sum()
            out.append(float(mse))
    return out


def ae_scores(
    collection_dir: str | Path,
    queries_dir: str | Path,
    out_path: str | Path,
    kind: str = "denoising",
    image_size: int = 224,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 12,
    noise_std: float = 0.2,
    mask_ratio: float = 0.75,
    seed: int = 0,
    **arch,
) -> Path:
    """Train on the collection, write per-query reconstruction MSE."""
    _, train_images, _ = load_corpus(collection_dir, image_size)
    trained = train_ae(
        train_images,
        kind=kind,
        image_size=image_size,
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        noise_std=noise_std,
        mask_ratio=mask_ratio,
        seed=seed,
        **arch,
    )
    q_ids, q_images, _ = load_corpus(queries_dir, image_size)
    mses = reconstruction_mse(trained, q_images)
    out = PredictorOutput(
        name=f"ae_{kind}",
        orientation=Orientation.HIGHER_IS_HARDER,
        scores=dict(zip(q_ids, mses)),
    )
    path = Path(out_path)
    write_scores(out, path)
    return path

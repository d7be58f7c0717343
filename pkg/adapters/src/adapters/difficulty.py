"""Generic image difficulty: VGG ensemble features into an SVR.

The regressor is trained on externally labeled (image, difficulty)
pairs; the labels themselves are not redistributable, so callers either
pass training data or a previously fitted regressor. Higher predicted
scores mean harder images.
"""

from __future__ import annotations

import pickle
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torchvision import models

from qpp.core import Orientation, PredictorOutput
from qpp.io import write_scores

from .errors import MissingTargets, MissingWeights
from .imaging import load_corpus, seed_all

DEFAULT_ENSEMBLE = ("vgg11", "vgg13", "vgg16")


def _feature_net(arch: str, weights: str | Path | None) -> nn.Module:
    ctor = getattr(models, arch, None)
    if ctor is None:
        raise MissingWeights(f"unknown torchvision architecture {arch!r}")
    net = ctor(weights=None)
    if weights is not None:
        net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    # keep everything up to the penultimate dense layer
    net.classifier = nn.Sequential(*list(net.classifier.children())[:-1])
    net.eval()
    return net


def ensemble_features(
    images: torch.Tensor,
    ensemble: Sequence[str] = DEFAULT_ENSEMBLE,
    weights: Mapping[str, str | Path] | None = None,
    batch_size: int = 16,
    seed: int = 0,
) -> np.ndarray:
    """Concatenated penultimate-layer activations across the ensemble."""
    seed_all(seed)
    per_net = []
    for arch in ensemble:
        net = _feature_net(arch, (weights or {}).get(arch))
        chunks = []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                chunks.append(net(images[start : start + batch_size]))
        per_net.append(torch.cat(chunks).double().numpy())
    return np.concatenate(per_net, axis=1)


def fit_difficulty(
    train_dir: str | Path,
    targets: Mapping[str, float],
    image_size: int = 224,
    ensemble: Sequence[str] = DEFAULT_ENSEMBLE,
    weights: Mapping[str, str | Path] | None = None,
    seed: int = 0,
):
    """SVR on ensemble features; returns (regressor, config dict)."""
    from sklearn.svm import SVR

    ids, images, _ = load_corpus(train_dir, image_size)
    missing = [q for q in ids if q not in targets]
    if missing:
        raise MissingTargets(f"no difficulty target for {missing[:5]!r}")
    feats = ensemble_features(images, ensemble, weights, seed=seed)
    reg = SVR(kernel="rbf")
    reg.fit(feats, [targets[q] for q in ids])
    return reg, {"image_size": image_size, "ensemble": tuple(ensemble), "seed": seed}


def save_difficulty(reg, config: dict, path: str | Path) -> None:
    Path(path).write_bytes(pickle.dumps({"regressor": reg, "config": config}))


def load_difficulty(path: str | Path):
    payload = pickle.loads(Path(path).read_bytes())
    return payload["regressor"], payload["config"]


def difficulty_scores(
    queries_dir: str | Path,
    out_path: str | Path,
    regressor=None,
    config: dict | None = None,
    model_path: str | Path | None = None,
    weights: Mapping[str, str | Path] | None = None,
) -> Path:
    """Score queries with a fitted difficulty regressor.

    Pass either (regressor, config) from fit_difficulty or a model_path
    saved by save_difficulty; without one there is nothing to apply.
    """
    if regressor is None:
        if model_path is None:
            raise MissingWeights(
                "difficulty_scores needs a fitted regressor or a model_path"
            )
        regressor, config = load_difficulty(model_path)
    if config is None:
        raise MissingWeights("missing the config dict that accompanies the regressor")

    ids, images, _ = load_corpus(queries_dir, config["image_size"])
    feats = ensemble_features(
        images, config["ensemble"], weights, seed=config["seed"]
    )
    preds = regressor.predict(feats)
    out = PredictorOutput(
        name="image_difficulty",
        orientation=Orientation.HIGHER_IS_HARDER,
        scores={q: float(p) for q, p in zip(ids, preds)},
    )
    path = Path(out_path)
    write_scores(out, path)
    return path

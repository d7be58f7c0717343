"""Self-supervised classification head over frozen embeddings.

A small MLP (two hidden layers of 50 ReLU units, softmax output) trained
with Adam on k-means pseudo-labels. Written directly in numpy so training
is bit-reproducible from the seed: fixed batch order per epoch from the
seeded generator, fixed parameter update order, float64 throughout.

The predictor scores are shape statistics of the softmax vector: a peaked
(confident) output has high variance and high kurtosis, a uniform one has
none, so both are HIGHER_IS_BETTER signals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EmbeddingStore
from .errors import DegenerateLabels, DimensionMismatch, LengthMismatch
from . import io

HIDDEN_UNITS = 50
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ClassHead:
    """Trained MLP weights plus the metadata needed to reproduce them."""

    weights: dict[str, np.ndarray]  # w1,b1,w2,b2,w3,b3 in float64
    n_classes: int
    lr: float
    epochs: int
    batch_size: int
    seed: int
    initial_loss: float
    final_loss: float

    @property
    def dim(self) -> int:
        return int(self.weights["w1"].shape[0])


def _forward(weights: dict[str, np.ndarray], x: np.ndarray):
    z1 = x @ weights["w1"] + weights["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ weights["w2"] + weights["b2"]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ weights["w3"] + weights["b3"]
    return z3, (x, z1, a1, z2, a2)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def _mean_ce(weights: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = _forward(weights, x)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(y)), y].mean())


def train_class_head(
    collection: EmbeddingStore,
    labels: np.ndarray,
    n_classes: int | None = None,
    lr: float = 1e-4,
    epochs: int = 100,
    batch_size: int = 64,
    seed: int = 0,
) -> ClassHead:
    """Minimize cross-entropy on (embedding, pseudo-label) pairs with Adam.

    The embedding model is frozen; only the head trains. Deterministic for
    a fixed seed: He init and epoch shuffles come from one generator, and
    batches are consumed in shuffle order.
    """
    x = collection.vectors.astype(np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(y) != len(x):
        raise LengthMismatch(f"{len(x)} embeddings but {len(y)} labels")
    if np.unique(y).size < 2:
        raise DegenerateLabels("need at least 2 distinct pseudo-labels")
    k = int(n_classes) if n_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= k:
        raise DegenerateLabels(f"labels must lie in [0, {k})")

    rng = np.random.default_rng(seed)
    d = x.shape[1]
    weights = {
        "w1": rng.normal(0.0, np.sqrt(2.0 / d), size=(d, HIDDEN_UNITS)),
        "b1": np.zeros(HIDDEN_UNITS),
        "w2": rng.normal(0.0, np.sqrt(2.0 / HIDDEN_UNITS), size=(HIDDEN_UNITS, HIDDEN_UNITS)),
        "b2": np.zeros(HIDDEN_UNITS),
        "w3": rng.normal(0.0, np.sqrt(2.0 / HIDDEN_UNITS), size=(HIDDEN_UNITS, k)),
        "b3": np.zeros(k),
    }
    param_order = ("w1", "b1", "w2", "b2", "w3", "b3")
    m = {p: np.zeros_like(weights[p]) for p in param_order}
    v = {p: np.zeros_like(weights[p]) for p in param_order}
    t = 0

    initial_loss = _mean_ce(weights, x, y)
    n = len(x)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            logits, (xi, z1, a1, z2, a2) = _forward(weights, xb)
            probs = _softmax(logits)
            b = len(idx)
            dz3 = probs
            dz3[np.arange(b), yb] -= 1.0
            dz3 /= b
            grads = {
                "w3": a2.T @ dz3,
                "b3": dz3.sum(axis=0),
            }
            da2 = dz3 @ weights["w3"].T
            dz2 = da2 * (z2 > 0.0)
            grads["w2"] = a1.T @ dz2
            grads["b2"] = dz2.sum(axis=0)
            da1 = dz2 @ weights["w2"].T
            dz1 = da1 * (z1 > 0.0)
            grads["w1"] = xi.T @ dz1
            grads["b1"] = dz1.sum(axis=0)

            t += 1
            for p in param_order:
                m[p] = ADAM_BETA1 * m[p] + (1.0 - ADAM_BETA1) * grads[p]
                v[p] = ADAM_BETA2 * v[p] + (1.0 - ADAM_BETA2) * grads[p] ** 2
                m_hat = m[p] / (1.0 - ADAM_BETA1**t)
                v_hat = v[p] / (1.0 - ADAM_BETA2**t)
                weights[p] = weights[p] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    final_loss = _mean_ce(weights, x, y)
    return ClassHead(
        weights=weights,
        n_classes=k,
        lr=lr,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        initial_loss=initial_loss,
        final_loss=final_loss,
    )


def predict_proba(head: ClassHead, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities; accepts one vector or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.shape[1] != head.dim:
        raise DimensionMismatch(f"input dim {arr.shape[1]} != head dim {head.dim}")
    logits, _ = _forward(head.weights, arr)
    probs = _softmax(logits)
    return probs[0] if single else probs


def training_accuracy(head: ClassHead, collection: EmbeddingStore, labels: np.ndarray) -> float:
    probs = predict_proba(head, collection.vectors.astype(np.float64))
    return float((probs.argmax(axis=1) == np.asarray(labels).ravel()).mean())


def class_head_dispersion(head: ClassHead, query_vec: np.ndarray) -> float:
    """Population variance of the K softmax probabilities."""
    p = predict_proba(head, query_vec)
    return float(np.mean((p - p.mean()) ** 2))


def class_head_kurtosis(head: ClassHead, query_vec: np.ndarray) -> float:
    """Population excess kurtosis of the K softmax probabilities.

    A uniform output has zero spread; its kurtosis is defined as 0 so the
    score stays finite at the distribution's least-informative point.
    """
    p = predict_proba(head, query_vec)
    centered = p - p.mean()
    m2 = float(np.mean(centered**2))
    if m2 == 0.0:
        return 0.0
    m4 = float(np.mean(centered**4))
    return m4 / (m2 * m2) - 3.0


def save_class_head(head: ClassHead, path: str | Path) -> None:
    meta = {
        "n_classes": head.n_classes,
        "lr": head.lr,
        "epochs": head.epochs,
        "batch_size": head.batch_size,
        "seed": head.seed,
        "initial_loss": head.initial_loss,
        "final_loss": head.final_loss,
    }
    io.write_framed(path, io.MAGIC_CLASSHEAD, meta, head.weights)


def load_class_head(path: str | Path) -> ClassHead:
    meta, arrays = io.read_framed(path, io.MAGIC_CLASSHEAD)
    return ClassHead(
        weights=arrays,
        n_classes=int(meta["n_classes"]),
        lr=float(meta["lr"]),
        epochs=int(meta["epochs"]),
        batch_size=int(meta["batch_size"]),
        seed=int(meta["seed"]),
        initial_loss=float(meta["initial_loss"]),
        final_loss=float(meta["final_loss"]),
    )

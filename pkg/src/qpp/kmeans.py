"""Seeded k-means over collection embeddings and the cluster-density score.

Lloyd iterations with k-means++ seeding, written against numpy directly so
the behaviour is pinned: first-occurrence argmin gives lowest-index tie
breaks, reductions happen in fixed order, and a given seed always yields
the same model at any BLAS thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EmbeddingStore
from .errors import DimensionMismatch, KTooLarge
from . import io

CONVERGENCE_TOL = 1e-6
MAX_ITERATIONS = 300


@dataclass(frozen=True)
class KMeansModel:
    """Fitted clustering plus the per-cluster statistics Eq.-style scores use."""

    ids: tuple[str, ...]
    centroids: np.ndarray  # (K, d) float64
    assignments: np.ndarray  # (n,) int64, aligned with ids
    sizes: np.ndarray  # (K,) int64
    variances: np.ndarray  # (K,) float64, mean squared distance to centroid
    seed: int
    iterations: int
    sse_history: tuple[float, ...]

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def _pairwise_sq(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance of every row to every centroid, >= 0."""
    x_sq = np.einsum("ij,ij->i", x, x)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    d2 = x_sq[:, None] - 2.0 * (x @ centroids.T) + c_sq[None, :]
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = np.einsum("ij,ij->i", x - centroids[0], x - centroids[0])
    for j in range(1, k):
        total = float(closest.sum())
        if total > 0.0:
            probs = closest / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = int(rng.integers(n))
        centroids[j] = x[idx]
        d = np.einsum("ij,ij->i", x - centroids[j], x - centroids[j])
        np.minimum(closest, d, out=closest)
    return centroids


def fit_kmeans(collection: EmbeddingStore, k: int = 150, seed: int = 0) -> KMeansModel:
    """Lloyd's algorithm; stops when max centroid displacement < 1e-6.

    Empty clusters are re-seeded with the point currently farthest from its
    own centroid. Within-cluster SSE is asserted non-increasing across
    assignment steps and kept on the model as ``sse_history``.
    """
    n = len(collection)
    if k > n:
        raise KTooLarge(f"K={k} exceeds collection size {n}")
    if k < 1:
        raise KTooLarge(f"K must be >= 1, got {k}")
    x = collection.vectors.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)

    history: list[float] = []
    prev_sse = np.inf
    iterations = 0
    for _ in range(MAX_ITERATIONS):
        iterations += 1
        d2 = _pairwise_sq(x, centroids)
        assign = np.argmin(d2, axis=1)
        costs = d2[np.arange(n), assign]
        sse = float(costs.sum())
        assert sse <= prev_sse * (1.0 + 1e-12) + 1e-12, "SSE increased"
        history.append(sse)
        prev_sse = sse

        new_centroids = np.empty_like(centroids)
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centroids[j] = x[assign == j].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            far_order = np.argsort(-costs, kind="stable")
            for pos, j in enumerate(empties):
                new_centroids[j] = x[far_order[pos]]

        displacement = float(
            np.max(np.linalg.norm(new_centroids - centroids, axis=1))
        )
        centroids = new_centroids
        if displacement < CONVERGENCE_TOL:
            break

    # final assignment consistent with the final centroids
    d2 = _pairwise_sq(x, centroids)
    assign = np.argmin(d2, axis=1)
    costs = d2[np.arange(n), assign]
    sse = float(costs.sum())
    assert sse <= prev_sse * (1.0 + 1e-12) + 1e-12, "SSE increased"
    history.append(sse)

    sizes = np.bincount(assign, minlength=k).astype(np.int64)
    variances = np.zeros(k, dtype=np.float64)
    for j in range(k):
        if sizes[j] > 0:
            variances[j] = float(costs[assign == j].mean())
    return KMeansModel(
        ids=collection.ids,
        centroids=centroids,
        assignments=assign.astype(np.int64),
        sizes=sizes,
        variances=variances,
        seed=seed,
        iterations=iterations,
        sse_history=tuple(history),
    )


def cluster_density(model: KMeansModel, query_vec: np.ndarray) -> float:
    """(distance to nearest centroid + that cluster's variance) / cluster size.

    Nearest centroid by Euclidean distance over non-empty clusters only;
    ties resolve to the lowest cluster index. Higher values mark harder
    queries (sparse, far-away neighborhoods).
    """
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    if q.shape[0] != model.dim:
        raise DimensionMismatch(f"query dim {q.shape[0]} != model dim {model.dim}")
    diffs = model.centroids - q
    dists = np.sqrt(np.maximum(np.einsum("ij,ij->i", diffs, diffs), 0.0))
    valid = np.flatnonzero(model.sizes > 0)
    j = int(valid[np.argmin(dists[valid])])
    return float((dists[j] + model.variances[j]) / model.sizes[j])


def save_kmeans(model: KMeansModel, path: str | Path) -> None:
    meta = {
        "ids": list(model.ids),
        "seed": model.seed,
        "iterations": model.iterations,
        "sse_history": list(model.sse_history),
        "k": model.k,
    }
    arrays = {
        "centroids": model.centroids,
        "assignments": model.assignments,
        "sizes": model.sizes,
        "variances": model.variances,
    }
    io.write_framed(path, io.MAGIC_KMEANS, meta, arrays)


def load_kmeans(path: str | Path) -> KMeansModel:
    meta, arrays = io.read_framed(path, io.MAGIC_KMEANS)
    return KMeansModel(
        ids=tuple(meta["ids"]),
        centroids=arrays["centroids"],
        assignments=arrays["assignments"].astype(np.int64),
        sizes=arrays["sizes"].astype(np.int64),
        variances=arrays["variances"],
        seed=int(meta["seed"]),
        iterations=int(meta["iterations"]),
        sse_history=tuple(float(v) for v in meta["sse_history"]),
    )

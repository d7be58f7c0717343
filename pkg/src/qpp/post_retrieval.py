"""Post-retrieval predictors: signals from the top-k ranked list itself.

All operate on the k=100 prefix of a ranking plus the collection store.
The feature-removal predictor re-ranks repeatedly; rather than cloning the
collection matrix with dimensions zeroed, it maintains per-row dot
products and squared norms incrementally, which gives the same similarity
values the zeroed matrix would (removed dimensions contribute zero to
both the query and every row).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import AbstractSet, Iterable, Sequence

import numpy as np

from .core import (
    EmbeddingStore,
    Orientation,
    PredictorOutput,
    Qrels,
    RankedList,
    RetrievalConfig,
    Similarity,
)
from .errors import DimensionMismatch, EmptyList, NonFiniteValue, UnknownDocId


def score_variance(ranked: RankedList) -> float:
    """Population variance of the retrieval similarity values.

    High variance means the list separates strong from weak matches, a
    confident retrieval; a flat score profile predicts trouble.
    """
    if len(ranked) == 0:
        raise EmptyList(f"ranked list for {ranked.query_id!r} is empty")
    scores = ranked.scores.astype(np.float64)
    # the mean of n identical floats need not round back to that float, so
    # the constant case is short-circuited to keep the zero identity exact
    if np.all(scores == scores[0]):
        return 0.0
    mean = scores.mean()
    return float(np.mean((scores - mean) ** 2))


def median_image(
    ranked: RankedList,
    store: EmbeddingStore,
    similarity: Similarity = Similarity.COSINE,
) -> str:
    """The retrieved id whose embedding sits closest to the retrieved mean.

    COSINE picks the highest cosine to the mean; NEG_EUCLIDEAN the smallest
    distance. Ties, and the degenerate zero-mean cosine case where every
    direction is equally close, resolve to the ascending-id order.
    """
    if len(ranked) == 0:
        raise EmptyList(f"ranked list for {ranked.query_id!r} is empty")
    try:
        vectors = store.rows(ranked.ids).astype(np.float64)
    except KeyError as e:
        raise UnknownDocId(f"ranked id {e.args[0]!r} missing from store") from e
    mean = vectors.mean(axis=0)
    if similarity is Similarity.COSINE:
        mean_norm = np.linalg.norm(mean)
        if mean_norm == 0.0:
            return min(ranked.ids)
        norms = np.linalg.norm(vectors, axis=1)
        norms[norms == 0.0] = np.inf  # zero rows can never win
        closeness = (vectors @ mean) / (norms * mean_norm)
        best = min(range(len(ranked)), key=lambda i: (-closeness[i], ranked.ids[i]))
    else:
        dists = np.linalg.norm(vectors - mean, axis=1)
        best = min(range(len(ranked)), key=lambda i: (dists[i], ranked.ids[i]))
    return ranked.ids[best]


def embedding_variance(ranked: RankedList, store: EmbeddingStore) -> float:
    """Mean squared Euclidean deviation of retrieved embeddings from their mean."""
    if len(ranked) == 0:
        raise EmptyList(f"ranked list for {ranked.query_id!r} is empty")
    try:
        vectors = store.rows(ranked.ids).astype(np.float64)
    except KeyError as e:
        raise UnknownDocId(f"ranked id {e.args[0]!r} missing from store") from e
    if np.all(vectors == vectors[0]):
        return 0.0  # same rounding caveat as score_variance
    centered = vectors - vectors.mean(axis=0)
    return float(np.mean(np.einsum("ij,ij->i", centered, centered)))


def adapted_query_feedback(
    ranked: RankedList,
    collection: EmbeddingStore,
    cfg: RetrievalConfig,
    ignore: AbstractSet[str] = frozenset(),
) -> float:
    """IoU between the original top-k set and the median image's top-k set.

    The median image acts as a feedback query q'; a stable neighborhood
    (IoU near 1) signals an easy query.
    """
    from .retrieval import rank  # local import avoids a module cycle

    median_id = median_image(ranked, collection, cfg.similarity)
    requery = rank(
        f"{ranked.query_id}::feedback",
        collection.row(median_id),
        collection,
        cfg,
        ignore,
    )
    a, b = set(ranked.ids), set(requery.ids)
    union = a | b
    if not union:
        raise EmptyList(f"ranked list for {ranked.query_id!r} is empty")
    return len(a & b) / len(union)


@dataclass(frozen=True)
class RemovalResult:
    score: float
    iterations_run: int
    exhausted: bool  # fewer than l removal rounds fit into the dimensions


def iterative_feature_removal(
    query_id: str,
    query_vec: np.ndarray,
    collection: EmbeddingStore,
    cfg: RetrievalConfig,
    m: int = 50,
    l: int = 15,
    ignore: AbstractSet[str] = frozenset(),
) -> RemovalResult:
    """Stability of the top-k set under repeated removal of hot dimensions.

    Each round scores every surviving dimension by q ⊙ (sum of the current
    top-k embeddings), zeroes the m highest-scoring dimensions out of the
    query and (implicitly) the collection, and re-ranks. The final score is
    the global IoU of all l+1 top-k sets. When the dimensions run out (or
    the query goes to zero) the loop stops early and the result is flagged
    ``exhausted``.
    """
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    d = collection.dim
    if q.shape[0] != d:
        raise DimensionMismatch(f"query has dim {q.shape[0]}, collection {d}")
    if not np.all(np.isfinite(q)):
        raise NonFiniteValue("query vector has non-finite entries")
    if cfg.similarity is Similarity.COSINE:
        nrm = np.linalg.norm(q)
        if nrm > 0.0:
            q = q / nrm

    vectors = collection.vectors
    if ignore:
        unknown = [doc for doc in ignore if doc not in collection.index]
        if unknown:
            raise UnknownDocId(f"ignore set references unknown id {unknown[0]!r}")
    keep = np.ones(len(collection), dtype=bool)
    for doc in ignore:
        keep[collection.index[doc]] = False
    cand = np.flatnonzero(keep)

    # incremental state: dots/q_sq/row_sq track the zeroed vectors exactly
    dots = vectors @ q
    row_sq = np.einsum("ij,ij->i", vectors, vectors, dtype=np.float64)
    q_sq = float(q @ q)
    removed = np.zeros(d, dtype=bool)
    q_current = q.copy()

    def top_index_set() -> np.ndarray:
        if cfg.similarity is Similarity.COSINE:
            denom = np.sqrt(np.maximum(row_sq, 0.0)) * np.sqrt(max(q_sq, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                sims = np.where(denom > 0.0, dots / denom, -np.inf)
        else:
            sims = -np.sqrt(np.maximum(row_sq - 2.0 * dots + q_sq, 0.0))
        sub = sims[cand]
        valid = np.isfinite(sub)
        pool = cand[valid]
        order = np.lexsort((collection.id_sort_rank[pool], -sub[valid]))
        return pool[order[: min(cfg.k, pool.size)]]

    top = top_index_set()
    sets = [frozenset(int(i) for i in top)]
    running = set(sets[0])
    exhausted = False
    iterations_run = 0

    for _ in range(l):
        if removed.all() or q_sq <= 0.0 or top.size == 0:
            exhausted = True
            break
        colsum = vectors[top].sum(axis=0, dtype=np.float64)
        dim_scores = q_current * colsum
        dim_scores[removed] = -np.inf
        surviving = int((~removed).sum())
        take = min(m, surviving)
        hot = np.argsort(-dim_scores, kind="stable")[:take]
        if take < m:
            exhausted = True

        # update incremental state for the newly zeroed dimensions
        dots -= vectors[:, hot].astype(np.float64) @ q_current[hot]
        row_sq -= np.einsum(
            "ij,ij->i", vectors[:, hot], vectors[:, hot], dtype=np.float64
        )
        row_sq = np.maximum(row_sq, 0.0)
        q_sq -= float(q_current[hot] @ q_current[hot])
        q_sq = max(q_sq, 0.0)
        q_current[hot] = 0.0
        removed[hot] = True

        top = top_index_set()
        current = frozenset(int(i) for i in top)
        sets.append(current)
        new_running = running & current
        assert len(new_running) <= len(running), "intersection grew"
        running = new_running
        iterations_run += 1
        if removed.all() or q_sq <= 0.0:
            exhausted = True
            break

    union: set[int] = set()
    for s in sets:
        union |= s
    score = 1.0 if not union else len(running) / len(union)
    return RemovalResult(score=score, iterations_run=iterations_run, exhausted=exhausted)


# ------------------------------------------------------- predictor assembly


def score_variance_predictor(rankings: Iterable[RankedList]) -> PredictorOutput:
    return PredictorOutput(
        name="score_variance",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores={rl.query_id: score_variance(rl) for rl in rankings},
    )


def embedding_variance_predictor(
    rankings: Iterable[RankedList], store: EmbeddingStore
) -> PredictorOutput:
    return PredictorOutput(
        name="embedding_variance",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores={rl.query_id: embedding_variance(rl, store) for rl in rankings},
    )


def aqf_predictor(
    rankings: Sequence[RankedList],
    collection: EmbeddingStore,
    cfg: RetrievalConfig,
    qrels: Qrels | None = None,
    workers: int = 1,
) -> PredictorOutput:
    def one(rl: RankedList) -> float:
        ignore = qrels.ignored(rl.query_id) if qrels is not None else frozenset()
        return adapted_query_feedback(rl, collection, cfg, ignore)

    values = _map_in_order(one, rankings, workers)
    return PredictorOutput(
        name="adapted_query_feedback",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores={rl.query_id: v for rl, v in zip(rankings, values)},
    )


def removal_predictor(
    queries: EmbeddingStore,
    collection: EmbeddingStore,
    cfg: RetrievalConfig,
    qrels: Qrels | None = None,
    m: int = 50,
    l: int = 15,
    workers: int = 1,
) -> tuple[PredictorOutput, dict[str, RemovalResult]]:
    """Feature-removal scores plus per-query run metadata (early stops)."""

    def one(i: int) -> RemovalResult:
        qid = queries.ids[i]
        ignore = qrels.ignored(qid) if qrels is not None else frozenset()
        return iterative_feature_removal(
            qid, queries.vectors[i], collection, cfg, m, l, ignore
        )

    results = _map_in_order(one, range(len(queries)), workers)
    details = {qid: res for qid, res in zip(queries.ids, results)}
    output = PredictorOutput(
        name="feature_removal",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores={qid: res.score for qid, res in details.items()},
    )
    return output, details


def _map_in_order(fn, items, workers: int) -> list:
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

"""Exact embedding-space retrieval and ground-truth effectiveness measures.

Collections at the scales handled here (tens of thousands of items) get
exact brute-force search; there is deliberately no approximate index.
Similarities accumulate in float64 regardless of the float32 storage.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import AbstractSet, Iterable, Sequence

import numpy as np

from .core import (
    EffectivenessTable,
    EmbeddingStore,
    Measure,
    Qrels,
    RankedList,
    RetrievalConfig,
    Similarity,
)
from .errors import (
    DimensionMismatch,
    EmptyRelevantSet,
    NonFiniteValue,
    UnknownDocId,
    ZeroVector,
)


def ensure_unit_norm(store: EmbeddingStore) -> EmbeddingStore:
    """Scale rows to unit L2 (used for COSINE); zero rows are rejected."""
    if store.normalized:
        return store
    rows = store.vectors.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroVector(
            f"cannot normalize zero vector for id {store.ids[zero[0]]!r}"
        )
    rows = rows / norms[:, None]
    return EmbeddingStore.create(
        store.ids, rows.astype(np.float32), normalized=True
    )


def _similarity_to_query(
    q: np.ndarray, collection: EmbeddingStore, similarity: Similarity
) -> np.ndarray:
    """Float64 similarity of every collection row to the query vector."""
    vectors = collection.vectors
    if similarity is Similarity.COSINE:
        return vectors @ q
    dots = vectors @ q
    row_sq = np.einsum("ij,ij->i", vectors, vectors, dtype=np.float64)
    d2 = np.maximum(row_sq - 2.0 * dots + q @ q, 0.0)
    return -np.sqrt(d2)


def _prepare_query(
    query_vec: np.ndarray, dim: int, similarity: Similarity
) -> np.ndarray:
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    if q.shape[0] != dim:
        raise DimensionMismatch(f"query has dim {q.shape[0]}, collection {dim}")
    if not np.all(np.isfinite(q)):
        raise NonFiniteValue("query vector has non-finite entries")
    if similarity is Similarity.COSINE:
        nrm = np.linalg.norm(q)
        if nrm == 0.0:
            raise ZeroVector("cosine query vector has zero norm")
        q = q / nrm
    return q


def rank(
    query_id: str,
    query_vec: np.ndarray,
    collection: EmbeddingStore,
    cfg: RetrievalConfig,
    ignore: AbstractSet[str] = frozenset(),
) -> RankedList:
    """Top-k non-ignored collection ids by similarity, ties by ascending id.

    Deterministic: equal scores are ordered by id, and each query is
    independent, so the output does not depend on storage order or on how
    many queries run in parallel.
    """
    q = _prepare_query(query_vec, collection.dim, cfg.similarity)
    scores = _similarity_to_query(q, collection, cfg.similarity)

    if ignore:
        unknown = [d for d in ignore if d not in collection.index]
        if unknown:
            raise UnknownDocId(f"ignore set references unknown id {unknown[0]!r}")
        keep = np.ones(len(collection), dtype=bool)
        for d in ignore:
            keep[collection.index[d]] = False
        cand = np.flatnonzero(keep)
    else:
        cand = np.arange(len(collection))

    order = np.lexsort((collection.id_sort_rank[cand], -scores[cand]))
    top = cand[order[: min(cfg.k, cand.size)]]
    return RankedList(
        query_id=query_id,
        ids=tuple(collection.ids[i] for i in top),
        scores=scores[top],
    )


def rank_all(
    queries: EmbeddingStore,
    collection: EmbeddingStore,
    cfg: RetrievalConfig,
    qrels: Qrels | None = None,
    workers: int = 1,
) -> list[RankedList]:
    """Rank every query in store order; parallelism never changes output.

    Results are assembled in query order regardless of worker count.
    """

    def one(i: int) -> RankedList:
        qid = queries.ids[i]
        ignore = qrels.ignored(qid) if qrels is not None else frozenset()
        return rank(qid, queries.vectors[i], collection, cfg, ignore)

    indices = range(len(queries))
    if workers <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, indices))


def average_precision(ranked: RankedList, relevant: AbstractSet[str]) -> float:
    """(1/R) * sum over relevant ranks i of (relevant in top i)/i.

    Computed over the ranking as given; for ground truth that ranking must
    cover the full (non-ignored) collection. Summation uses fsum so the
    value is the correctly rounded sum, independent of term order.
    """
    if not relevant:
        raise EmptyRelevantSet(f"query {ranked.query_id!r} has no relevant ids")
    hits = 0
    terms = []
    for i, did in enumerate(ranked.ids, start=1):
        if did in relevant:
            hits += 1
            terms.append(hits / i)
    return math.fsum(terms) / len(relevant)


def precision_at_k(
    ranked: RankedList, relevant: AbstractSet[str], k: int = 100
) -> float:
    """|relevant in top k| / k; divides by k even when fewer items exist."""
    if not relevant:
        raise EmptyRelevantSet(f"query {ranked.query_id!r} has no relevant ids")
    hits = sum(1 for did in ranked.ids[:k] if did in relevant)
    return hits / k


def ground_truth_tables(
    full_rankings: Sequence[RankedList],
    qrels: Qrels,
    k: int = 100,
) -> tuple[EffectivenessTable, EffectivenessTable]:
    """AP and P@k tables from full-collection rankings."""
    ap: dict[str, float] = {}
    pk: dict[str, float] = {}
    for rl in full_rankings:
        relevant = qrels.relevant(rl.query_id)
        ap[rl.query_id] = average_precision(rl, relevant)
        pk[rl.query_id] = precision_at_k(rl, relevant, k)
    return (
        EffectivenessTable(measure=Measure.AP, values=ap),
        EffectivenessTable(measure=Measure.P_AT_K, values=pk, k=k),
    )


def similarity_matrix(
    ranked: RankedList,
    store: EmbeddingStore,
    similarity: Similarity = Similarity.COSINE,
) -> np.ndarray:
    """Pairwise similarity of the retrieved embeddings; symmetric float64."""
    try:
        vectors = store.rows(ranked.ids).astype(np.float64)
    except KeyError as e:
        raise UnknownDocId(f"ranked id {e.args[0]!r} missing from store") from e
    if similarity is Similarity.COSINE:
        m = vectors @ vectors.T
    else:
        row_sq = np.einsum("ij,ij->i", vectors, vectors)
        d2 = np.maximum(row_sq[:, None] + row_sq[None, :] - 2.0 * (vectors @ vectors.T), 0.0)
        m = -np.sqrt(d2)
    m = (m + m.T) / 2.0
    return m + 0.0  # folds any -0.0 into +0.0


def similarity_matrices(
    rankings: Iterable[RankedList],
    store: EmbeddingStore,
    similarity: Similarity = Similarity.COSINE,
) -> dict[str, np.ndarray]:
    return {rl.query_id: similarity_matrix(rl, store, similarity) for rl in rankings}

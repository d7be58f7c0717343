"""Shared data model: embedding stores, relevance judgments, ranked lists.

Embeddings are stored as float32 rows (matching common dump formats); all
statistics downstream accumulate in float64. Every type here is immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyRelevantSet,
    EngineError,
    InvalidRange,
    NonFiniteValue,
    UnknownDocId,
)

UNIT_NORM_TOL = 1e-5


class Similarity(Enum):
    COSINE = "cosine"
    NEG_EUCLIDEAN = "neg_euclidean"


class Label(Enum):
    RELEVANT = 1
    NONRELEVANT = 0
    IGNORE = -1


class Orientation(Enum):
    HIGHER_IS_BETTER = "HIGHER_IS_BETTER"
    HIGHER_IS_HARDER = "HIGHER_IS_HARDER"


class Measure(Enum):
    AP = "ap"
    P_AT_K = "p@k"


class Violation(NamedTuple):
    """One structural problem found by a validator."""

    code: str
    message: str


@dataclass(frozen=True)
class EmbeddingStore:
    """Id-indexed matrix of d-dimensional image embeddings."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (n, dim) float32, write-protected
    normalized: bool

    @classmethod
    def create(
        cls,
        ids: Iterable[str],
        vectors: np.ndarray,
        normalized: bool | None = None,
    ) -> "EmbeddingStore":
        """Build a validated store; raises on the first violation.

        ``normalized`` is measured from the row norms when not given.
        """
        arr = np.asarray(vectors, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(0, 0) if arr.size == 0 else arr.reshape(1, -1)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        if normalized is None:
            normalized = bool(arr.size) and _rows_unit_norm(arr)
        store = cls(ids=tuple(ids), vectors=arr, normalized=bool(normalized))
        violations = validate_store(store)
        if violations:
            v = violations[0]
            exc = _VIOLATION_EXCEPTIONS.get(v.code)
            if exc is not None:
                raise exc(v.message)
            raise ValidationFailure(v)
        return store

    @classmethod
    def unchecked(
        cls, ids: Iterable[str], vectors: np.ndarray, normalized: bool = False
    ) -> "EmbeddingStore":
        """Bypass validation (for building malformed fixtures)."""
        arr = np.asarray(vectors)
        return cls(ids=tuple(ids), vectors=arr, normalized=normalized)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.ndim == 2 else 0

    def __len__(self) -> int:
        return len(self.ids)

    @cached_property
    def index(self) -> dict[str, int]:
        return {doc_id: i for i, doc_id in enumerate(self.ids)}

    @cached_property
    def id_sort_rank(self) -> np.ndarray:
        """Position of each row's id in ascending id order (tie-break key)."""
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        rank = np.empty(len(self.ids), dtype=np.int64)
        for pos, row in enumerate(order):
            rank[row] = pos
        return rank

    def row(self, doc_id: str) -> np.ndarray:
        return self.vectors[self.index[doc_id]]

    def rows(self, doc_ids: Iterable[str]) -> np.ndarray:
        idx = [self.index[d] for d in doc_ids]
        return self.vectors[idx]


def _rows_unit_norm(arr: np.ndarray) -> bool:
    norms = np.linalg.norm(arr.astype(np.float64, copy=False), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL))


def validate_store(store: EmbeddingStore) -> list[Violation]:
    """Check every EmbeddingStore invariant; never raises.

    Returns an empty list iff the store is well-formed, otherwise one
    Violation per problem found.
    """
    out: list[Violation] = []
    ids = store.ids
    arr = store.vectors

    if len(ids) == 0:
        out.append(Violation("EMPTY_STORE", "store holds no ids"))
    seen: set[str] = set()
    for doc_id in ids:
        if not isinstance(doc_id, str) or doc_id == "":
            out.append(Violation("EMPTY_ID", "blank or non-string id"))
        elif doc_id in seen:
            out.append(Violation("DUPLICATE_ID", f"duplicate id {doc_id!r}"))
        else:
            seen.add(doc_id)

    if not isinstance(arr, np.ndarray) or arr.ndim != 2:
        out.append(
            Violation("DIMENSION_MISMATCH", "vectors must form a 2-d matrix")
        )
        return out
    n, dim = arr.shape
    if n != len(ids):
        out.append(
            Violation(
                "DIMENSION_MISMATCH",
                f"{len(ids)} ids but {n} vector rows",
            )
        )
    if dim < 1:
        out.append(Violation("DIMENSION_MISMATCH", "dim must be >= 1"))
    if arr.size and not np.all(np.isfinite(arr)):
        bad = int(np.sum(~np.isfinite(arr)))
        out.append(
            Violation("NON_FINITE_VALUE", f"{bad} non-finite entries")
        )
    elif store.normalized and arr.size and n == len(ids) and not _rows_unit_norm(arr):
        out.append(
            Violation(
                "NOT_NORMALIZED",
                f"normalized flag set but some row norm is off by more than {UNIT_NORM_TOL}",
            )
        )
    return out


class ValidationFailure(EngineError):
    """Raised by checked constructors for violations without a named class."""

    def __init__(self, violation: Violation):
        self.code = violation.code
        super().__init__(violation.message)


_VIOLATION_EXCEPTIONS = {
    "DUPLICATE_ID": DuplicateId,
    "DIMENSION_MISMATCH": DimensionMismatch,
    "NON_FINITE_VALUE": NonFiniteValue,
}


@dataclass(frozen=True)
class Qrels:
    """Per-query relevance labels over collection ids.

    Unlisted (query, doc) pairs are NONRELEVANT. Every query carries at
    least one RELEVANT id (enforced at construction).
    """

    labels: Mapping[str, Mapping[str, Label]]

    @classmethod
    def create(
        cls,
        labels: Mapping[str, Mapping[str, Label]],
        collection_ids: Iterable[str] | None = None,
    ) -> "Qrels":
        known = set(collection_ids) if collection_ids is not None else None
        frozen: dict[str, dict[str, Label]] = {}
        for qid, docs in labels.items():
            if known is not None:
                for did in docs:
                    if did not in known:
                        raise UnknownDocId(
                            f"qrels for {qid!r} reference unknown doc {did!r}"
                        )
            if not any(lab is Label.RELEVANT for lab in docs.values()):
                raise EmptyRelevantSet(
                    f"query {qid!r} has no relevant documents"
                )
            frozen[qid] = dict(docs)
        return cls(labels=frozen)

    def queries(self) -> tuple[str, ...]:
        return tuple(sorted(self.labels))

    def label(self, qid: str, doc_id: str) -> Label:
        return self.labels.get(qid, {}).get(doc_id, Label.NONRELEVANT)

    def relevant(self, qid: str) -> frozenset[str]:
        return frozenset(
            d for d, lab in self.labels.get(qid, {}).items() if lab is Label.RELEVANT
        )

    def ignored(self, qid: str) -> frozenset[str]:
        return frozenset(
            d for d, lab in self.labels.get(qid, {}).items() if lab is Label.IGNORE
        )


@dataclass(frozen=True)
class RetrievalConfig:
    """The delta half of a retrieval tuple plus the predictor cutoff."""

    similarity: Similarity = Similarity.COSINE
    k: int = 100
    name: str = ""

    def __post_init__(self):
        if self.k < 1:
            raise EngineError(f"k must be >= 1, got {self.k}")
        if not self.name:
            object.__setattr__(self, "name", self.similarity.value)


@dataclass(frozen=True)
class RankedList:
    """Ordered (doc id, similarity) entries for one query, best first."""

    query_id: str
    ids: tuple[str, ...]
    scores: np.ndarray  # float64, parallel to ids

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        if len(self.ids) != len(scores):
            raise LengthError("ids and scores differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateId(f"ranked list for {self.query_id!r} repeats an id")
        for i in range(1, len(self.ids)):
            if scores[i] > scores[i - 1] or (
                scores[i] == scores[i - 1] and self.ids[i] <= self.ids[i - 1]
            ):
                raise EngineError(
                    "entries must be strictly ordered by (score desc, id asc)"
                )

    def __len__(self) -> int:
        return len(self.ids)

    def prefix(self, k: int) -> "RankedList":
        """Top-k prefix (the whole list when it is shorter than k)."""
        if k >= len(self.ids):
            return self
        return RankedList(self.query_id, self.ids[:k], self.scores[:k])


class LengthError(EngineError):
    code = "LENGTH_MISMATCH"


@dataclass(frozen=True)
class PredictorOutput:
    """Per-query scores emitted by one predictor.

    ``orientation`` records the predictor's native sign convention; scores
    are never flipped, so reported correlations stay signed.
    """

    name: str
    orientation: Orientation
    scores: Mapping[str, float]

    def __post_init__(self):
        for qid, val in self.scores.items():
            if not np.isfinite(val):
                raise NonFiniteValue(
                    f"predictor {self.name!r} scored {qid!r} with non-finite {val!r}"
                )

    def vector(self, query_ids: Iterable[str]) -> np.ndarray:
        missing = [q for q in query_ids if q not in self.scores]
        if missing:
            raise MissingError(
                f"predictor {self.name!r} lacks scores for {missing[:5]!r}"
            )
        return np.array([self.scores[q] for q in query_ids], dtype=np.float64)


class MissingError(EngineError):
    code = "MISSING_SCORES"


@dataclass(frozen=True)
class EffectivenessTable:
    """Ground-truth per-query effectiveness in [0, 1]."""

    measure: Measure
    values: Mapping[str, float]
    k: int | None = None  # cutoff for P_AT_K; None for AP

    def __post_init__(self):
        for qid, val in self.values.items():
            if not (0.0 <= val <= 1.0):
                raise InvalidRange(
                    f"effectiveness for {qid!r} is {val!r}, outside [0, 1]"
                )

    def vector(self, query_ids: Iterable[str]) -> np.ndarray:
        return np.array([self.values[q] for q in query_ids], dtype=np.float64)

    @property
    def label(self) -> str:
        if self.measure is Measure.AP:
            return "ap"
        return f"p@{self.k}"

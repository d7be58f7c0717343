"""Pre-retrieval predictors: signals available before any search runs.

Three families: detection statistics of the query image (ingested from a
detections file), cluster-density of the query against a fitted k-means
model, and shape statistics of a self-supervised classification head's
softmax output. Deep per-query scores computed outside the engine enter
through external score files and are passed along untouched.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable

from .classhead import ClassHead, class_head_dispersion, class_head_kurtosis
from .core import EmbeddingStore, Orientation, PredictorOutput
from .io import DetectionFile, load_scores
from .kmeans import KMeansModel, cluster_density


def objects_over_area(dets: DetectionFile, query_id: str) -> float:
    """Object count divided by the mean detected box area.

    Cluttered queries (many small objects) score high and are expected to
    be hard. A query with no detections scores 0: no objects means nothing
    to confuse the search, so it sits at the easy end of this signal.
    Invariant to box ordering (fsum is correctly rounded).
    """
    boxes = dets.for_query(query_id)
    m = len(boxes)
    if m == 0:
        return 0.0
    mean_area = math.fsum(b.w * b.h for b in boxes) / m
    return m / mean_area


def detection_predictor(
    dets: DetectionFile, query_ids: Iterable[str]
) -> PredictorOutput:
    scores = {qid: objects_over_area(dets, qid) for qid in query_ids}
    return PredictorOutput(
        name="objects_over_area",
        orientation=Orientation.HIGHER_IS_HARDER,
        scores=scores,
    )


def density_predictor(model: KMeansModel, queries: EmbeddingStore) -> PredictorOutput:
    scores = {
        qid: cluster_density(model, queries.vectors[i])
        for i, qid in enumerate(queries.ids)
    }
    return PredictorOutput(
        name="cluster_density",
        orientation=Orientation.HIGHER_IS_HARDER,
        scores=scores,
    )


def dispersion_predictor(head: ClassHead, queries: EmbeddingStore) -> PredictorOutput:
    scores = {
        qid: class_head_dispersion(head, queries.vectors[i])
        for i, qid in enumerate(queries.ids)
    }
    return PredictorOutput(
        name="class_dispersion",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores=scores,
    )


def kurtosis_predictor(head: ClassHead, queries: EmbeddingStore) -> PredictorOutput:
    scores = {
        qid: class_head_kurtosis(head, queries.vectors[i])
        for i, qid in enumerate(queries.ids)
    }
    return PredictorOutput(
        name="class_kurtosis",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores=scores,
    )


def register_external_predictor(path: str | Path) -> PredictorOutput:
    """Ingest a score file produced outside the engine (AE/ViT/CNN/...)."""
    return load_scores(path)

"""Query-performance prediction over precomputed image embeddings.

Given a collection store, a query store and relevance judgments, the
engine runs exact query-by-example retrieval, computes ground-truth
effectiveness (AP, P@k), scores a suite of pre- and post-retrieval
predictors plus a supervised meta-regressor, and reports signed Pearson
and Kendall tau-b correlations with significance tests.
"""

from .core import (
    EffectivenessTable,
    EmbeddingStore,
    Label,
    Measure,
    Orientation,
    PredictorOutput,
    Qrels,
    RankedList,
    RetrievalConfig,
    Similarity,
    validate_store,
)
from .errors import EngineError

__version__ = "0.1.0"

__all__ = [
    "EffectivenessTable",
    "EmbeddingStore",
    "EngineError",
    "Label",
    "Measure",
    "Orientation",
    "PredictorOutput",
    "Qrels",
    "RankedList",
    "RetrievalConfig",
    "Similarity",
    "validate_store",
    "__version__",
]

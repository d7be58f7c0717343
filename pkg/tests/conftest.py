import json

import numpy as np
import pytest

from qpp.core import EmbeddingStore


def random_store(n, dim, seed=0, normalized=False, prefix="d"):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, dim)).astype(np.float32)
    if normalized:
        vecs = vecs / np.linalg.norm(vecs.astype(np.float64), axis=1, keepdims=True)
        vecs = vecs.astype(np.float32)
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    return EmbeddingStore.create(ids, vecs, normalized=normalized)


@pytest.fixture
def store_factory():
    return random_store


def make_cluster_corpus(
    n_clusters=3,
    docs_per=100,
    queries_per=4,
    dim=32,
    center_scale=2.0,
    doc_noise=1.6,
    query_noise=2.0,
    seed=42,
):
    """Gaussian-cluster corpus where relevance = same-cluster membership."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1, (n_clusters, dim)) * center_scale
    doc_ids, doc_vecs, doc_cluster = [], [], []
    for c in range(n_clusters):
        pts = centers[c] + rng.normal(0, doc_noise, (docs_per, dim))
        for i, p in enumerate(pts):
            doc_ids.append(f"d{c}_{i:04d}")
            doc_vecs.append(p)
            doc_cluster.append(c)
    q_ids, q_vecs, q_cluster = [], [], []
    for c in range(n_clusters):
        for j in range(queries_per):
            q_ids.append(f"q{c}_{j}")
            q_vecs.append(centers[c] + rng.normal(0, query_noise, dim))
            q_cluster.append(c)
    collection = EmbeddingStore.create(doc_ids, np.array(doc_vecs, dtype=np.float32))
    queries = EmbeddingStore.create(q_ids, np.array(q_vecs, dtype=np.float32))
    labels = {
        qi: {di: 1 for di, dc in zip(doc_ids, doc_cluster) if dc == qc}
        for qi, qc in zip(q_ids, q_cluster)
    }
    return collection, queries, labels, centers, (doc_cluster, q_cluster)


@pytest.fixture(scope="session")
def cluster_corpus():
    return make_cluster_corpus()


def write_config(tmp_path, paths, name="config.json", **overrides):
    """Small-corpus pipeline config; overrides merge over fast defaults."""
    cfg = {
        "collection": paths["collection"],
        "queries": paths["queries"],
        "qrels": paths["qrels"],
        "systems": [{"name": "cosine", "similarity": "cosine", "k": 10}],
        "kmeans": {"k": 3, "seed": 0},
        "classhead": {"epochs": 5, "lr": 1e-3},
        "removal": {"m": 6, "l": 2},
        "meta": {"enabled": True, "folds": 5, "seed": 0},
        "p_at_k": 10,
        "out_dir": str(tmp_path / "out"),
    }
    if "detections" in paths:
        cfg["detections"] = paths["detections"]
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def write_corpus_files(tmp_path, collection, queries, labels, detections=None):
    """Materialize a corpus as the on-disk formats the CLI consumes."""
    from qpp import io

    io.write_embeddings_binary(collection, tmp_path / "docs.bin")
    io.write_embeddings_jsonl(queries, tmp_path / "queries.jsonl")
    with open(tmp_path / "qrels.tsv", "w") as fh:
        for qid in sorted(labels):
            for did, lab in sorted(labels[qid].items()):
                fh.write(f"{qid}\t{did}\t{lab}\n")
    paths = {
        "collection": str(tmp_path / "docs.bin"),
        "queries": str(tmp_path / "queries.jsonl"),
        "qrels": str(tmp_path / "qrels.tsv"),
    }
    if detections is not None:
        with open(tmp_path / "dets.jsonl", "w") as fh:
            for qid in sorted(detections):
                fh.write(json.dumps({"id": qid, "boxes": detections[qid]}) + "\n")
        paths["detections"] = str(tmp_path / "dets.jsonl")
    return paths

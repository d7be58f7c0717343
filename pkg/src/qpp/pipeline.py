"""End-to-end orchestration: ingest, retrieve, score, regress, report.

Every stage is a pure function of the resolved config and the input files,
so re-running with the same config hash rewrites byte-identical artifacts.
The hash covers everything that can change results; it deliberately skips
``out_dir`` and ``workers``, which only move bytes around or change how
many threads compute the same numbers.

Stage failures surface as PipelineError carrying the stage name, so the
CLI can report "stage ingest: ..." and pick the right exit code.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import classhead as ch
from . import io, kmeans, meta, post_retrieval, pre_retrieval, retrieval
from .core import (
    EffectivenessTable,
    EmbeddingStore,
    PredictorOutput,
    Qrels,
    RetrievalConfig,
    Similarity,
)
from .errors import ConfigError, DimensionMismatch, EngineError, InvalidRange
from .evaluation import EvaluationReport, SystemEvaluation, build_report

PRE_PREDICTORS = (
    "objects_over_area",
    "cluster_density",
    "class_dispersion",
    "class_kurtosis",
)
POST_PREDICTORS = (
    "score_variance",
    "embedding_variance",
    "adapted_query_feedback",
    "feature_removal",
)
KNOWN_PREDICTORS = PRE_PREDICTORS + POST_PREDICTORS


@dataclass(frozen=True)
class SystemSpec:
    name: str
    similarity: Similarity
    k: int = 100


@dataclass(frozen=True)
class PipelineConfig:
    collection: str
    queries: str
    qrels: str
    systems: tuple[SystemSpec, ...]
    detections: str | None = None
    external_scores: tuple[str, ...] = ()
    predictors: tuple[str, ...] | None = None  # None = all feasible
    kmeans_k: int = 150
    kmeans_seed: int = 0
    classhead_lr: float = 1e-4
    classhead_epochs: int = 100
    classhead_batch: int = 64
    classhead_seed: int = 0
    removal_m: int = 50
    removal_l: int = 15
    meta_enabled: bool = True
    meta_folds: int = 5
    meta_seed: int = 0
    grid: meta.GridSpec = field(default_factory=meta.GridSpec)
    p_at_k: int = 100
    alpha: float = 0.01
    seed: int = 0
    workers: int = 1
    out_dir: str = "out"

    def hash_payload(self) -> dict[str, Any]:
        payload = {
            "collection": self.collection,
            "queries": self.queries,
            "qrels": self.qrels,
            "detections": self.detections,
            "external_scores": list(self.external_scores),
            "systems": [
                {"name": s.name, "similarity": s.similarity.value, "k": s.k}
                for s in self.systems
            ],
            "predictors": list(self.predictors) if self.predictors else None,
            "kmeans": {"k": self.kmeans_k, "seed": self.kmeans_seed},
            "classhead": {
                "lr": self.classhead_lr,
                "epochs": self.classhead_epochs,
                "batch_size": self.classhead_batch,
                "seed": self.classhead_seed,
            },
            "removal": {"m": self.removal_m, "l": self.removal_l},
            "meta": {
                "enabled": self.meta_enabled,
                "folds": self.meta_folds,
                "seed": self.meta_seed,
                "grid": {
                    "c_values": list(self.grid.c_values),
                    "nu_values": list(self.grid.nu_values),
                    "kernels": list(self.grid.kernels),
                },
            },
            "p_at_k": self.p_at_k,
            "alpha": self.alpha,
            "seed": self.seed,
        }
        return payload


def config_hash(cfg: PipelineConfig) -> str:
    canonical = json.dumps(cfg.hash_payload(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# --------------------------------------------------------------- config load

_ENV_OVERRIDES: dict[str, tuple[tuple[str, ...], type]] = {
    "IQPP_COLLECTION": (("collection",), str),
    "IQPP_QUERIES": (("queries",), str),
    "IQPP_QRELS": (("qrels",), str),
    "IQPP_DETECTIONS": (("detections",), str),
    "IQPP_OUT_DIR": (("out_dir",), str),
    "IQPP_SEED": (("seed",), int),
    "IQPP_WORKERS": (("workers",), int),
    "IQPP_ALPHA": (("alpha",), float),
    "IQPP_P_AT_K": (("p_at_k",), int),
    "IQPP_KMEANS_K": (("kmeans", "k"), int),
    "IQPP_KMEANS_SEED": (("kmeans", "seed"), int),
    "IQPP_CLASSHEAD_LR": (("classhead", "lr"), float),
    "IQPP_CLASSHEAD_EPOCHS": (("classhead", "epochs"), int),
    "IQPP_CLASSHEAD_BATCH_SIZE": (("classhead", "batch_size"), int),
    "IQPP_CLASSHEAD_SEED": (("classhead", "seed"), int),
    "IQPP_REMOVAL_M": (("removal", "m"), int),
    "IQPP_REMOVAL_L": (("removal", "l"), int),
    "IQPP_META_ENABLED": (("meta", "enabled"), bool),
    "IQPP_META_FOLDS": (("meta", "folds"), int),
    "IQPP_META_SEED": (("meta", "seed"), int),
}

_TOP_KEYS = {
    "collection",
    "queries",
    "qrels",
    "detections",
    "external_scores",
    "systems",
    "predictors",
    "kmeans",
    "classhead",
    "removal",
    "meta",
    "p_at_k",
    "alpha",
    "seed",
    "workers",
    "out_dir",
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes"):
        return True
    if raw.lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"cannot parse boolean from {raw!r}")


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Read the JSON config and apply IQPP_* environment overrides."""
    raw = io.load_json(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")

    env = dict(env if env is not None else os.environ)
    for var, (keypath, typ) in _ENV_OVERRIDES.items():
        if var not in env:
            continue
        value: Any = _parse_bool(env[var]) if typ is bool else typ(env[var])
        node = raw
        for key in keypath[:-1]:
            node = node.setdefault(key, {})
        node[keypath[-1]] = value

    for required in ("collection", "queries", "qrels", "systems"):
        if required not in raw:
            raise ConfigError(f"{path}: missing required key {required!r}")

    systems = []
    for entry in raw["systems"]:
        try:
            similarity = Similarity(entry["similarity"])
        except (KeyError, ValueError):
            raise ConfigError(f"bad system entry {entry!r}")
        systems.append(
            SystemSpec(
                name=str(entry.get("name", similarity.value)),
                similarity=similarity,
                k=int(entry.get("k", 100)),
            )
        )
    names = [s.name for s in systems]
    if len(set(names)) != len(names):
        raise ConfigError("system names must be unique")

    predictors = raw.get("predictors")
    if predictors is not None:
        bad = [p for p in predictors if p not in KNOWN_PREDICTORS]
        if bad:
            raise ConfigError(f"unknown predictors {bad}; known: {KNOWN_PREDICTORS}")
        predictors = tuple(predictors)

    km = raw.get("kmeans", {})
    head = raw.get("classhead", {})
    removal = raw.get("removal", {})
    meta_cfg = raw.get("meta", {})
    grid_cfg = meta_cfg.get("grid", {})
    grid = meta.GridSpec(
        c_values=tuple(grid_cfg.get("c_values", meta.DEFAULT_C_VALUES)),
        nu_values=tuple(grid_cfg.get("nu_values", meta.DEFAULT_NU_VALUES)),
        kernels=tuple(grid_cfg.get("kernels", meta.DEFAULT_KERNELS)),
    )
    try:
        return PipelineConfig(
            collection=str(raw["collection"]),
            queries=str(raw["queries"]),
            qrels=str(raw["qrels"]),
            detections=raw.get("detections"),
            external_scores=tuple(raw.get("external_scores", ())),
            systems=tuple(systems),
            predictors=predictors,
            kmeans_k=int(km.get("k", 150)),
            kmeans_seed=int(km.get("seed", 0)),
            classhead_lr=float(head.get("lr", 1e-4)),
            classhead_epochs=int(head.get("epochs", 100)),
            classhead_batch=int(head.get("batch_size", 64)),
            classhead_seed=int(head.get("seed", 0)),
            removal_m=int(removal.get("m", 50)),
            removal_l=int(removal.get("l", 15)),
            meta_enabled=bool(meta_cfg.get("enabled", True)),
            meta_folds=int(meta_cfg.get("folds", 5)),
            meta_seed=int(meta_cfg.get("seed", 0)),
            grid=grid,
            p_at_k=int(raw.get("p_at_k", 100)),
            alpha=float(raw.get("alpha", 0.01)),
            seed=int(raw.get("seed", 0)),
            workers=int(raw.get("workers", 1)),
            out_dir=str(raw.get("out_dir", "out")),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: bad config value: {e}") from e


# ------------------------------------------------------------ stage plumbing


class PipelineError(EngineError):
    """An engine or I/O failure tagged with the pipeline stage it hit."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")
        if isinstance(cause, EngineError):
            self.code = cause.code
        elif isinstance(cause, OSError):
            self.code = "IO_ERROR"

    @property
    def input_error(self) -> bool:
        """True when the user can fix it (bad files/config), not a bug."""
        if isinstance(self.cause, OSError):
            return True
        return isinstance(self.cause, EngineError) and self.cause.code != "INTERNAL"


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except (EngineError, OSError) as e:
        raise PipelineError(name, e) from e


# ------------------------------------------------------------------ the run


@dataclass
class PipelineState:
    """Everything computed so far; later stages extend it."""

    cfg: PipelineConfig
    cfg_hash: str
    collection: EmbeddingStore | None = None
    queries: EmbeddingStore | None = None
    qrels: Qrels | None = None
    detections: io.DetectionFile | None = None
    external: list[PredictorOutput] = field(default_factory=list)
    stores: dict[str, EmbeddingStore] = field(default_factory=dict)  # per system
    query_stores: dict[str, EmbeddingStore] = field(default_factory=dict)
    full_rankings: dict[str, list] = field(default_factory=dict)
    tables: dict[str, dict[str, EffectivenessTable]] = field(default_factory=dict)
    predictors: dict[str, list[PredictorOutput]] = field(default_factory=dict)
    kmeans_model: kmeans.KMeansModel | None = None
    head: ch.ClassHead | None = None
    folds: dict[str, int] = field(default_factory=dict)
    cv_runs: dict[tuple[str, str], list[meta.FoldRun]] = field(default_factory=dict)
    report: EvaluationReport | None = None

    @property
    def header(self) -> dict[str, str]:
        return {"config": self.cfg_hash, "seed": str(self.cfg.seed)}


def _retrieval_config(spec: SystemSpec) -> RetrievalConfig:
    return RetrievalConfig(similarity=spec.similarity, k=spec.k, name=spec.name)


def ingest(state: PipelineState) -> None:
    cfg = state.cfg
    with _stage("ingest"):
        state.collection = io.load_embeddings(cfg.collection)
        state.queries = io.load_embeddings(cfg.queries)
        if state.collection.dim != state.queries.dim:
            raise DimensionMismatch(
                f"collection dim {state.collection.dim} != query dim {state.queries.dim}"
            )
        state.qrels = io.load_qrels(cfg.qrels, state.collection.ids)
        if cfg.detections:
            state.detections = io.load_detections(cfg.detections)
        for score_path in cfg.external_scores:
            state.external.append(io.load_scores(score_path))
        for spec in cfg.systems:
            if spec.similarity is Similarity.COSINE:
                state.stores[spec.name] = retrieval.ensure_unit_norm(state.collection)
                state.query_stores[spec.name] = retrieval.ensure_unit_norm(state.queries)
            else:
                state.stores[spec.name] = state.collection
                state.query_stores[spec.name] = state.queries


def retrieve(state: PipelineState) -> None:
    cfg = state.cfg
    with _stage("retrieve"):
        for spec in cfg.systems:
            collection = state.stores[spec.name]
            full_cfg = RetrievalConfig(
                similarity=spec.similarity, k=len(collection), name=spec.name
            )
            state.full_rankings[spec.name] = retrieval.rank_all(
                state.query_stores[spec.name],
                collection,
                full_cfg,
                state.qrels,
                workers=cfg.workers,
            )


def ground_truth(state: PipelineState) -> None:
    cfg = state.cfg
    with _stage("ground-truth"):
        for spec in cfg.systems:
            ap, pk = retrieval.ground_truth_tables(
                state.full_rankings[spec.name], state.qrels, k=cfg.p_at_k
            )
            state.tables[spec.name] = {ap.label: ap, pk.label: pk}


def _wanted(cfg: PipelineConfig, name: str, feasible: bool) -> bool:
    if cfg.predictors is None:
        return feasible
    if name in cfg.predictors and not feasible:
        raise ConfigError(f"predictor {name!r} requested but its inputs are missing")
    return name in cfg.predictors


def predict(state: PipelineState) -> None:
    cfg = state.cfg
    with _stage("predict"):
        shared: list[PredictorOutput] = []
        if _wanted(cfg, "objects_over_area", state.detections is not None):
            shared.append(
                pre_retrieval.detection_predictor(state.detections, state.queries.ids)
            )
        # cluster statistics run on L2-normalized embeddings (monotone
        # equivalent to cosine neighborhoods on the unit sphere)
        norm_collection = retrieval.ensure_unit_norm(state.collection)
        norm_queries = retrieval.ensure_unit_norm(state.queries)
        need_kmeans = _wanted(cfg, "cluster_density", True) or _wanted(
            cfg, "class_dispersion", True
        ) or _wanted(cfg, "class_kurtosis", True)
        if need_kmeans:
            state.kmeans_model = kmeans.fit_kmeans(
                norm_collection, k=cfg.kmeans_k, seed=cfg.kmeans_seed
            )
        if _wanted(cfg, "cluster_density", True):
            shared.append(
                pre_retrieval.density_predictor(state.kmeans_model, norm_queries)
            )
        if _wanted(cfg, "class_dispersion", True) or _wanted(cfg, "class_kurtosis", True):
            state.head = ch.train_class_head(
                norm_collection,
                state.kmeans_model.assignments,
                n_classes=state.kmeans_model.k,
                lr=cfg.classhead_lr,
                epochs=cfg.classhead_epochs,
                batch_size=cfg.classhead_batch,
                seed=cfg.classhead_seed,
            )
            if _wanted(cfg, "class_dispersion", True):
                shared.append(pre_retrieval.dispersion_predictor(state.head, norm_queries))
            if _wanted(cfg, "class_kurtosis", True):
                shared.append(pre_retrieval.kurtosis_predictor(state.head, norm_queries))
        shared.extend(state.external)

        for spec in cfg.systems:
            collection = state.stores[spec.name]
            rcfg = _retrieval_config(spec)
            topk = [rl.prefix(spec.k) for rl in state.full_rankings[spec.name]]
            per_system = list(shared)
            if _wanted(cfg, "score_variance", True):
                per_system.append(post_retrieval.score_variance_predictor(topk))
            if _wanted(cfg, "embedding_variance", True):
                per_system.append(
                    post_retrieval.embedding_variance_predictor(topk, collection)
                )
            if _wanted(cfg, "adapted_query_feedback", True):
                per_system.append(
                    post_retrieval.aqf_predictor(
                        topk, collection, rcfg, state.qrels, workers=cfg.workers
                    )
                )
            if _wanted(cfg, "feature_removal", True):
                output, _details = post_retrieval.removal_predictor(
                    state.query_stores[spec.name],
                    collection,
                    rcfg,
                    state.qrels,
                    m=cfg.removal_m,
                    l=cfg.removal_l,
                    workers=cfg.workers,
                )
                per_system.append(output)
            state.predictors[spec.name] = per_system


def train_meta(state: PipelineState) -> None:
    cfg = state.cfg
    if not cfg.meta_enabled:
        return
    with _stage("train-meta"):
        state.folds = meta.make_folds(
            state.queries.ids, folds=cfg.meta_folds, seed=cfg.meta_seed
        )
        for spec in cfg.systems:
            table = meta.FeatureTable.from_predictors(
                state.predictors[spec.name], sorted(state.queries.ids)
            )
            for label, eff in sorted(state.tables[spec.name].items()):
                state.cv_runs[(spec.name, label)] = meta.run_cv(
                    table, eff, state.folds, grid=cfg.grid, seed=cfg.meta_seed
                )


def evaluate(state: PipelineState) -> None:
    cfg = state.cfg
    with _stage("evaluate"):
        blocks = [
            SystemEvaluation(
                name=spec.name,
                tables=state.tables[spec.name],
                predictors=state.predictors[spec.name],
            )
            for spec in cfg.systems
        ]
        state.report = build_report(
            blocks,
            supervised=state.cv_runs,
            meta={
                "config": state.cfg_hash,
                "seed": cfg.seed,
                "queries": len(state.queries),
                "collection": len(state.collection),
                "systems": [s.name for s in cfg.systems],
            },
            alpha=cfg.alpha,
        )


def write_artifacts(state: PipelineState) -> Path:
    cfg = state.cfg
    out = Path(cfg.out_dir)
    with _stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        io.dump_json(
            {"hash": state.cfg_hash, "config": cfg.hash_payload()},
            out / "config.resolved.json",
        )
        for spec in cfg.systems:
            if spec.name not in state.full_rankings:
                continue
            ranked_dir = out / "ranked"
            ranked_dir.mkdir(exist_ok=True)
            topk = [rl.prefix(spec.k) for rl in state.full_rankings[spec.name]]
            io.write_ranked_lists(topk, ranked_dir / f"{spec.name}.tsv", state.header)
        for spec in cfg.systems:
            for label, table in sorted(state.tables.get(spec.name, {}).items()):
                gt_dir = out / "ground_truth"
                gt_dir.mkdir(exist_ok=True)
                safe = label.replace("@", "_at_")
                io.write_effectiveness(
                    table, gt_dir / f"{spec.name}.{safe}.tsv", state.header
                )
        for spec in cfg.systems:
            if spec.name not in state.predictors:
                continue
            score_dir = out / "scores" / spec.name
            score_dir.mkdir(parents=True, exist_ok=True)
            for pred in state.predictors[spec.name]:
                io.write_scores(pred, score_dir / f"{pred.name}.tsv", state.header)
        models_dir = out / "models"
        models_dir.mkdir(exist_ok=True)
        if state.kmeans_model is not None:
            kmeans.save_kmeans(state.kmeans_model, models_dir / "kmeans.bin")
        if state.head is not None:
            ch.save_class_head(state.head, models_dir / "classhead.bin")
        if state.folds:
            io.write_folds(state.folds, out / "folds.tsv", state.header)
        for (system, label), runs in sorted(state.cv_runs.items()):
            svr_dir = models_dir / "svr" / system
            svr_dir.mkdir(parents=True, exist_ok=True)
            safe = label.replace("@", "_at_")
            for run in runs:
                meta.save_svr(run.model, svr_dir / f"{safe}.fold{run.fold}.bin")
        if state.report is not None:
            io.write_report(state.report, out / "report")
    return out


def run_pipeline(cfg: PipelineConfig) -> PipelineState:
    """All stages in order; returns the final state (report included)."""
    state = PipelineState(cfg=cfg, cfg_hash=config_hash(cfg))
    ingest(state)
    retrieve(state)
    ground_truth(state)
    predict(state)
    train_meta(state)
    evaluate(state)
    write_artifacts(state)
    return state


def emit_matrices(cfg: PipelineConfig) -> Path:
    """Write per-query top-k similarity matrices for every system."""
    state = PipelineState(cfg=cfg, cfg_hash=config_hash(cfg))
    ingest(state)
    retrieve(state)
    out = Path(cfg.out_dir) / "matrices"
    with _stage("emit-matrices"):
        out.mkdir(parents=True, exist_ok=True)
        for spec in cfg.systems:
            topk = [rl.prefix(spec.k) for rl in state.full_rankings[spec.name]]
            mats = retrieval.similarity_matrices(
                topk, state.stores[spec.name], spec.similarity
            )
            io.write_similarity_matrices(
                mats,
                out / f"{spec.name}.bin",
                meta={
                    "config": state.cfg_hash,
                    "seed": cfg.seed,
                    "similarity": spec.similarity.value,
                    "k": spec.k,
                },
            )
    return out


def sweep(cfg: PipelineConfig, param: str, values: list[int]) -> Path:
    """One full run per hyperparameter value plus a flat summary table."""
    if param not in ("K", "m", "l"):
        raise InvalidRange(f"sweep parameter must be K, m or l, got {param!r}")
    if not values:
        raise InvalidRange("sweep range is empty")
    base_out = Path(cfg.out_dir) / "sweep" / param
    summary_rows: list[tuple[int, Any]] = []
    for value in values:
        updates: dict[str, Any] = {"out_dir": str(base_out / str(value))}
        if param == "K":
            updates["kmeans_k"] = value
        elif param == "m":
            updates["removal_m"] = value
        else:
            updates["removal_l"] = value
        sub_cfg = replace_config(cfg, **updates)
        state = run_pipeline(sub_cfg)
        summary_rows.extend((value, row) for row in state.report.rows)
    with open(base_out / "summary.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# param={param}\n")
        fh.write("# value\tsystem\tmeasure\tpredictor\tpearson\tkendall\n")
        for value, row in summary_rows:
            fh.write(
                f"{value}\t{row.system}\t{row.measure}\t{row.predictor}"
                f"\t{io.fmt_float(row.pearson)}\t{io.fmt_float(row.kendall)}\n"
            )
    return base_out


def replace_config(cfg: PipelineConfig, **updates: Any) -> PipelineConfig:
    return replace(cfg, **updates)


def validate_inputs(cfg: PipelineConfig) -> dict[str, Any]:
    """Load and validate every input file; returns a small summary."""
    state = PipelineState(cfg=cfg, cfg_hash=config_hash(cfg))
    ingest(state)
    norms = np.linalg.norm(state.collection.vectors.astype(np.float64), axis=1)
    return {
        "config": state.cfg_hash,
        "collection": {
            "count": len(state.collection),
            "dim": state.collection.dim,
            "normalized": state.collection.normalized,
            "min_norm": float(norms.min()),
            "max_norm": float(norms.max()),
        },
        "queries": {"count": len(state.queries), "dim": state.queries.dim},
        "qrels_queries": len(state.qrels.labels),
        "detections": None
        if state.detections is None
        else {"queries": len(state.detections.boxes)},
        "external_scores": [p.name for p in state.external],
    }

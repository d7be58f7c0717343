"""Supervised meta-regressor: normalized predictor scores -> effectiveness.

The model family is nu-SVR with a small hyperparameter grid; fitting uses
the libsvm solver behind sklearn's NuSVR, but the fitted model is reduced
to plain arrays (support vectors, dual coefficients, intercept) and
prediction is reimplemented here in numpy, so persisted models have no
dependency on sklearn internals and predictions are reproducible from the
file alone.

Train/test hygiene: normalization bounds and SVR coefficients are computed
from training rows only; test rows are normalized with the stored bounds
and clipped into [0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import NuSVR

from .core import EffectivenessTable, Orientation, PredictorOutput
from .errors import (
    InvalidRange,
    MissingScores,
    NormalizationMismatch,
    TooFewQueries,
)
from . import io

DEFAULT_C_VALUES = (0.1, 1.0, 10.0, 100.0)
DEFAULT_NU_VALUES = (0.1, 0.25, 0.5, 0.75)
DEFAULT_KERNELS = ("linear", "rbf")
INNER_FOLDS = 3
SVR_TOL = 1e-3
SVR_MAX_ITER = 100_000


@dataclass(frozen=True)
class GridSpec:
    c_values: tuple[float, ...] = DEFAULT_C_VALUES
    nu_values: tuple[float, ...] = DEFAULT_NU_VALUES
    kernels: tuple[str, ...] = DEFAULT_KERNELS

    def points(self) -> list[tuple[float, float, str]]:
        return [
            (c, nu, kernel)
            for c in self.c_values
            for nu in self.nu_values
            for kernel in self.kernels
        ]


@dataclass(frozen=True)
class FeatureTable:
    """One row per query, one column per predictor, raw (unnormalized)."""

    query_ids: tuple[str, ...]
    columns: tuple[str, ...]
    matrix: np.ndarray  # (n, p) float64

    @classmethod
    def from_predictors(
        cls, outputs: Sequence[PredictorOutput], query_ids: Sequence[str]
    ) -> "FeatureTable":
        qids = tuple(query_ids)
        cols = []
        for out in outputs:
            missing = [q for q in qids if q not in out.scores]
            if missing:
                raise MissingScores(
                    f"predictor {out.name!r} lacks scores for {missing[:5]!r}"
                )
            cols.append([out.scores[q] for q in qids])
        matrix = np.array(cols, dtype=np.float64).T.reshape(len(qids), len(outputs))
        return cls(query_ids=qids, columns=tuple(o.name for o in outputs), matrix=matrix)

    def rows_for(self, qids: Iterable[str]) -> np.ndarray:
        index = {q: i for i, q in enumerate(self.query_ids)}
        return self.matrix[[index[q] for q in qids]]


def minmax_params(train_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if train_rows.shape[0] == 0:
        raise TooFewQueries("normalization needs at least one training row")
    return train_rows.min(axis=0), train_rows.max(axis=0)


def minmax_apply(rows: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """(x-lo)/(hi-lo), clipped to [0,1]; constant columns map to 0.5."""
    span = hi - lo
    out = np.empty_like(rows, dtype=np.float64)
    constant = span == 0.0
    safe_span = np.where(constant, 1.0, span)
    out[:] = (rows - lo) / safe_span
    out[:, constant] = 0.5
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class SvrModel:
    """nu-SVR reduced to arrays, with its normalization bounds attached."""

    kernel: str
    c: float
    nu: float
    gamma: float  # used by rbf; stored for both kernels
    support_vectors: np.ndarray  # (s, p)
    dual_coef: np.ndarray  # (s,)
    intercept: float
    norm_lo: np.ndarray
    norm_hi: np.ndarray
    columns: tuple[str, ...]
    degenerate: bool = False  # all training targets equal; constant predictor
    constant: float = 0.0

    @property
    def n_features(self) -> int:
        return len(self.columns)


def _gamma_scale(x: np.ndarray) -> float:
    var = float(x.var())
    return 1.0 / (x.shape[1] * var) if var > 0.0 else 1.0


def _fit_libsvm(
    x: np.ndarray, y: np.ndarray, c: float, nu: float, kernel: str, gamma: float
) -> tuple[np.ndarray, np.ndarray, float]:
    svr = NuSVR(
        C=c, nu=nu, kernel=kernel, gamma=gamma, tol=SVR_TOL, max_iter=SVR_MAX_ITER
    )
    with warnings.catch_warnings():
        # the iteration cap is part of the declared solver budget; capped
        # fits are still scored by CV error like any other grid point
        warnings.simplefilter("ignore", ConvergenceWarning)
        svr.fit(x, y)
    support = np.asarray(svr.support_vectors_, dtype=np.float64)
    dual = np.asarray(svr.dual_coef_, dtype=np.float64).ravel()
    intercept = float(np.asarray(svr.intercept_).ravel()[0])
    assert np.all(np.isfinite(dual)) and math.isfinite(intercept)
    assert np.all(np.abs(dual) <= c * (1.0 + 1e-9)), "dual coefficient exceeds box"
    return support, dual, intercept


def _kernel_apply(model_kernel: str, gamma: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if model_kernel == "linear":
        return a @ b.T
    sq = (
        np.einsum("ij,ij->i", a, a)[:, None]
        - 2.0 * (a @ b.T)
        + np.einsum("ij,ij->i", b, b)[None, :]
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


def predict(model: SvrModel, rows: np.ndarray) -> np.ndarray:
    """Predict from raw feature rows (normalization happens here)."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.shape[1] != model.n_features:
        raise NormalizationMismatch(
            f"model expects {model.n_features} columns, got {arr.shape[1]}"
        )
    if model.degenerate:
        return np.full(arr.shape[0], model.constant, dtype=np.float64)
    x = minmax_apply(arr, model.norm_lo, model.norm_hi)
    if model.support_vectors.shape[0] == 0:
        return np.full(arr.shape[0], model.intercept, dtype=np.float64)
    k = _kernel_apply(model.kernel, model.gamma, x, model.support_vectors)
    return k @ model.dual_coef + model.intercept


def _inner_folds(n: int, folds: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    sizes = [n // folds + (1 if i < n % folds else 0) for i in range(folds)]
    out = []
    start = 0
    for size in sizes:
        out.append(perm[start : start + size])
        start += size
    return out


def train_svr(
    table: FeatureTable,
    train_ids: Sequence[str],
    targets: Mapping[str, float],
    grid: GridSpec = GridSpec(),
    seed: int = 0,
) -> SvrModel:
    """Grid-searched nu-SVR on the training rows.

    Selection is inner 3-fold CV by mean squared error, walking the grid in
    a fixed order so ties resolve deterministically. All-equal targets give
    a flagged constant model instead of a degenerate solver call.
    """
    qids = list(train_ids)
    if len(qids) < 2 * INNER_FOLDS:
        raise TooFewQueries(
            f"need at least {2 * INNER_FOLDS} training rows, got {len(qids)}"
        )
    y = np.array([targets[q] for q in qids], dtype=np.float64)
    if np.any((y < 0.0) | (y > 1.0)):
        raise InvalidRange("targets must lie in [0, 1]")
    raw = table.rows_for(qids)
    lo, hi = minmax_params(raw)
    x = minmax_apply(raw, lo, hi)

    if np.all(y == y[0]):
        return SvrModel(
            kernel="constant",
            c=0.0,
            nu=0.0,
            gamma=0.0,
            support_vectors=np.zeros((0, x.shape[1])),
            dual_coef=np.zeros(0),
            intercept=0.0,
            norm_lo=lo,
            norm_hi=hi,
            columns=table.columns,
            degenerate=True,
            constant=float(y[0]),
        )

    gamma = _gamma_scale(x)
    splits = _inner_folds(len(qids), INNER_FOLDS, seed)
    best: tuple[float, int] | None = None  # (mse, grid position)
    points = grid.points()
    for pos, (c, nu, kernel) in enumerate(points):
        errors = []
        for held in splits:
            mask = np.ones(len(qids), dtype=bool)
            mask[held] = False
            if held.size == 0 or mask.sum() == 0:
                continue
            support, dual, intercept = _fit_libsvm(
                x[mask], y[mask], c, nu, kernel, gamma
            )
            if support.shape[0] == 0:
                pred = np.full(held.size, intercept)
            else:
                pred = _kernel_apply(kernel, gamma, x[held], support) @ dual + intercept
            errors.append(float(np.mean((pred - y[held]) ** 2)))
        mse = float(np.mean(errors))
        if best is None or mse < best[0]:
            best = (mse, pos)
    c, nu, kernel = points[best[1]]
    support, dual, intercept = _fit_libsvm(x, y, c, nu, kernel, gamma)
    return SvrModel(
        kernel=kernel,
        c=c,
        nu=nu,
        gamma=gamma,
        support_vectors=support,
        dual_coef=dual,
        intercept=intercept,
        norm_lo=lo,
        norm_hi=hi,
        columns=table.columns,
    )


def make_folds(query_ids: Sequence[str], folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Seeded near-equal partition; input order never matters (ids sorted first)."""
    ids = sorted(query_ids)
    n = len(ids)
    if n < folds:
        raise TooFewQueries(f"{n} queries cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    sizes = [n // folds + (1 if i < n % folds else 0) for i in range(folds)]
    assignment: dict[str, int] = {}
    start = 0
    for fold, size in enumerate(sizes):
        for idx in perm[start : start + size]:
            assignment[ids[idx]] = fold
        start += size
    return assignment


@dataclass(frozen=True)
class FoldRun:
    fold: int
    test_ids: tuple[str, ...]
    predictions: dict[str, float]
    model: SvrModel


def run_cv(
    table: FeatureTable,
    target: EffectivenessTable,
    folds_map: Mapping[str, int],
    grid: GridSpec = GridSpec(),
    seed: int = 0,
) -> list[FoldRun]:
    """One SVR per fold, each predicting only the queries it never saw."""
    fold_ids = sorted(set(folds_map.values()))
    runs = []
    for fold in fold_ids:
        test = tuple(q for q in table.query_ids if folds_map[q] == fold)
        train = tuple(q for q in table.query_ids if folds_map[q] != fold)
        model = train_svr(table, train, target.values, grid, seed)
        preds = predict(model, table.rows_for(test))
        runs.append(
            FoldRun(
                fold=fold,
                test_ids=test,
                predictions={q: float(p) for q, p in zip(test, preds)},
                model=model,
            )
        )
    return runs


def meta_predictor_output(runs: Sequence[FoldRun], measure_label: str) -> PredictorOutput:
    """Pool held-out predictions; each query is predicted exactly once."""
    scores: dict[str, float] = {}
    for run in runs:
        scores.update(run.predictions)
    return PredictorOutput(
        name=f"meta_svr[{measure_label}]",
        orientation=Orientation.HIGHER_IS_BETTER,
        scores=scores,
    )


def save_svr(model: SvrModel, path: str | Path) -> None:
    meta = {
        "kernel": model.kernel,
        "c": model.c,
        "nu": model.nu,
        "gamma": model.gamma,
        "intercept": model.intercept,
        "columns": list(model.columns),
        "degenerate": model.degenerate,
        "constant": model.constant,
    }
    arrays = {
        "support_vectors": model.support_vectors,
        "dual_coef": model.dual_coef,
        "norm_lo": model.norm_lo,
        "norm_hi": model.norm_hi,
    }
    io.write_framed(path, io.MAGIC_SVR, meta, arrays)


def load_svr(path: str | Path) -> SvrModel:
    meta, arrays = io.read_framed(path, io.MAGIC_SVR)
    return SvrModel(
        kernel=str(meta["kernel"]),
        c=float(meta["c"]),
        nu=float(meta["nu"]),
        gamma=float(meta["gamma"]),
        support_vectors=arrays["support_vectors"],
        dual_coef=arrays["dual_coef"],
        intercept=float(meta["intercept"]),
        norm_lo=arrays["norm_lo"],
        norm_hi=arrays["norm_hi"],
        columns=tuple(meta["columns"]),
        degenerate=bool(meta["degenerate"]),
        constant=float(meta["constant"]),
    )

"""Scoring predictors against ground truth: correlations and the report.

Pearson is the definitional sample correlation; Kendall is tau-b computed
by merge-sort pair counting, so large query sets stay O(n log n) while the
counts themselves are exact integers. Significance follows the classic
t-transform of a correlation coefficient, two-sided.

Correlations are reported signed, never flipped by predictor orientation:
a HIGHER_IS_HARDER predictor is expected to land negative, and that sign
is part of the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core import EffectivenessTable, PredictorOutput
from .errors import LengthMismatch
from .meta import FoldRun

DEFAULT_ALPHA = 0.01


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; NaN when either vector is constant."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"shapes {a.shape} and {b.shape} differ")
    if a.size < 3:
        raise LengthMismatch(f"need n >= 3, got {a.size}")
    ac = a - a.mean()
    bc = b - b.mean()
    sa = math.sqrt(float(ac @ ac))
    sb = math.sqrt(float(bc @ bc))
    if sa == 0.0 or sb == 0.0:
        return math.nan
    r = float(ac @ bc) / (sa * sb)
    return max(-1.0, min(1.0, r))


def _merge_count(values: list[float]) -> int:
    """Strict inversions (i<j with v[i] > v[j]) counted during merge sort."""
    n = len(values)
    buf = values[:]
    tmp = [0.0] * n
    swaps = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, out = lo, mid, lo
            while i < mid and j < hi:
                if buf[i] <= buf[j]:
                    tmp[out] = buf[i]
                    i += 1
                else:
                    tmp[out] = buf[j]
                    j += 1
                    swaps += mid - i
                out += 1
            while i < mid:
                tmp[out] = buf[i]
                i += 1
                out += 1
            while j < hi:
                tmp[out] = buf[j]
                j += 1
                out += 1
        buf, tmp = tmp, buf
        width *= 2
    return swaps


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Tau-b: tie-corrected Kendall correlation via merge-sort counting.

    All pair counts are exact integers; only the final ratio touches
    floating point, so the value matches brute-force pair enumeration bit
    for bit.
    """
    a = list(map(float, x))
    b = list(map(float, y))
    if len(a) != len(b):
        raise LengthMismatch(f"lengths {len(a)} and {len(b)} differ")
    n = len(a)
    if n < 3:
        raise LengthMismatch(f"need n >= 3, got {n}")

    order = sorted(range(n), key=lambda i: (a[i], b[i]))
    xs = [a[i] for i in order]
    ys = [b[i] for i in order]

    tot = n * (n - 1) // 2
    n1 = 0  # pairs tied in x
    n3 = 0  # pairs tied in both
    i = 0
    while i < n:
        j = i
        while j < n and xs[j] == xs[i]:
            j += 1
        run = j - i
        n1 += run * (run - 1) // 2
        k = i
        while k < j:
            kk = k
            while kk < j and ys[kk] == ys[k]:
                kk += 1
            both = kk - k
            n3 += both * (both - 1) // 2
            k = kk
        i = j

    swaps = _merge_count(ys)

    ys_sorted = sorted(ys)
    n2 = 0  # pairs tied in y
    i = 0
    while i < n:
        j = i
        while j < n and ys_sorted[j] == ys_sorted[i]:
            j += 1
        run = j - i
        n2 += run * (run - 1) // 2
        i = j

    denom_sq = (tot - n1) * (tot - n2)
    if denom_sq == 0:
        return math.nan
    return (tot - n1 - n2 + n3 - 2 * swaps) / math.sqrt(denom_sq)


class Significance(NamedTuple):
    t: float
    critical: float
    significant: bool
    flag: str  # "", "DEGENERATE" (|r|=1), or "UNDEFINED" (r is NaN)


def significance(r: float, n: int, alpha: float = DEFAULT_ALPHA) -> Significance:
    """Two-sided t-test of a correlation coefficient at level alpha.

    t = r * sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom. |r| = 1 gives
    an infinite statistic and is flagged significant by convention; an
    undefined (NaN) coefficient is flagged and never significant.
    """
    if n < 3:
        raise LengthMismatch(f"need n >= 3, got {n}")
    critical = float(stats.t.ppf(1.0 - alpha / 2.0, n - 2))
    if math.isnan(r):
        return Significance(math.nan, critical, False, "UNDEFINED")
    if abs(r) >= 1.0:
        return Significance(math.copysign(math.inf, r), critical, True, "DEGENERATE")
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Significance(t, critical, abs(t) > critical, "")


# ----------------------------------------------------------------- reporting


@dataclass(frozen=True)
class ReportRow:
    system: str
    measure: str
    predictor: str
    orientation: str
    n: int
    folds: int  # 0 for unsupervised predictors
    pearson: float  # fold-mean for supervised rows
    kendall: float
    pooled_pearson: float  # NaN for unsupervised rows
    pooled_kendall: float
    pearson_t: float
    pearson_critical: float
    pearson_significant: bool
    pearson_flag: str
    kendall_t: float
    kendall_critical: float
    kendall_significant: bool
    kendall_flag: str


CSV_COLUMNS = (
    "system",
    "measure",
    "predictor",
    "orientation",
    "n",
    "folds",
    "pearson",
    "kendall",
    "pooled_pearson",
    "pooled_kendall",
    "pearson_t",
    "pearson_critical",
    "pearson_significant",
    "pearson_flag",
    "kendall_t",
    "kendall_critical",
    "kendall_significant",
    "kendall_flag",
)


@dataclass(frozen=True)
class EvaluationReport:
    meta: dict[str, Any]
    rows: tuple[ReportRow, ...]
    plots: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "meta": dict(self.meta),
            "rows": [vars(r).copy() for r in self.rows],
        }

    def csv_rows(self) -> list[list[str]]:
        out = [list(CSV_COLUMNS)]
        for row in self.rows:
            record = vars(row)
            rendered = []
            for col in CSV_COLUMNS:
                v = record[col]
                if isinstance(v, bool):
                    rendered.append("true" if v else "false")
                elif isinstance(v, float):
                    rendered.append(repr(v))
                else:
                    rendered.append(str(v))
            out.append(rendered)
        return out

    def plot_series(self):
        for rel_path in sorted(self.plots):
            yield rel_path, self.plots[rel_path]


def _fs_name(name: str) -> str:
    return "".join("_" if ch in '/\\:*?"<>|' else ch for ch in name)


def _correlation_block(
    pred_vec: np.ndarray, truth_vec: np.ndarray, alpha: float
) -> tuple[float, float, Significance, Significance]:
    r = pearson(pred_vec, truth_vec)
    tau = kendall_tau(pred_vec, truth_vec)
    return r, tau, significance(r, len(pred_vec), alpha), significance(tau, len(pred_vec), alpha)


@dataclass(frozen=True)
class SystemEvaluation:
    """One retrieval system's ground truth and the predictors scored on it."""

    name: str
    tables: Mapping[str, EffectivenessTable]  # measure label -> table
    predictors: Sequence[PredictorOutput]


def build_report(
    blocks: Sequence[SystemEvaluation],
    supervised: Mapping[tuple[str, str], Sequence[FoldRun]] | None = None,
    meta: Mapping[str, Any] | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> EvaluationReport:
    """Correlate every predictor with every (system, measure) ground truth.

    ``supervised`` maps (system, measure label) to cross-validation fold
    runs; those rows carry both the fold-mean correlations (primary) and
    the pooled-prediction correlations (secondary, which is also where the
    t-test applies).
    """
    supervised = supervised or {}
    rows: list[ReportRow] = []
    plots: dict[str, list[tuple[float, float]]] = {}

    for block in blocks:
        system = block.name
        for measure_label in sorted(block.tables):
            table = block.tables[measure_label]
            qids = sorted(table.values)
            truth = table.vector(qids)

            for pred in block.predictors:
                vec = pred.vector(qids)
                r, tau, sig_r, sig_t = _correlation_block(vec, truth, alpha)
                rows.append(
                    ReportRow(
                        system=system,
                        measure=measure_label,
                        predictor=pred.name,
                        orientation=pred.orientation.value,
                        n=len(qids),
                        folds=0,
                        pearson=r,
                        kendall=tau,
                        pooled_pearson=math.nan,
                        pooled_kendall=math.nan,
                        pearson_t=sig_r.t,
                        pearson_critical=sig_r.critical,
                        pearson_significant=sig_r.significant,
                        pearson_flag=sig_r.flag,
                        kendall_t=sig_t.t,
                        kendall_critical=sig_t.critical,
                        kendall_significant=sig_t.significant,
                        kendall_flag=sig_t.flag,
                    )
                )
                key = f"{_fs_name(system)}/{_fs_name(measure_label)}/{_fs_name(pred.name)}.tsv"
                plots[key] = list(zip(truth.tolist(), vec.tolist()))

            runs = supervised.get((system, measure_label))
            if runs:
                fold_r: list[float] = []
                fold_tau: list[float] = []
                pooled: dict[str, float] = {}
                for run in runs:
                    fold_truth = table.vector(run.test_ids)
                    fold_pred = np.array(
                        [run.predictions[q] for q in run.test_ids], dtype=np.float64
                    )
                    fold_r.append(pearson(fold_pred, fold_truth))
                    fold_tau.append(kendall_tau(fold_pred, fold_truth))
                    pooled.update(run.predictions)
                pooled_vec = np.array([pooled[q] for q in qids], dtype=np.float64)
                pr, ptau, sig_r, sig_t = _correlation_block(pooled_vec, truth, alpha)
                name = f"meta_svr[{measure_label}]"
                rows.append(
                    ReportRow(
                        system=system,
                        measure=measure_label,
                        predictor=name,
                        orientation="HIGHER_IS_BETTER",
                        n=len(qids),
                        folds=len(runs),
                        pearson=float(np.mean(fold_r)),
                        kendall=float(np.mean(fold_tau)),
                        pooled_pearson=pr,
                        pooled_kendall=ptau,
                        pearson_t=sig_r.t,
                        pearson_critical=sig_r.critical,
                        pearson_significant=sig_r.significant,
                        pearson_flag=sig_r.flag or "POOLED_TEST",
                        kendall_t=sig_t.t,
                        kendall_critical=sig_t.critical,
                        kendall_significant=sig_t.significant,
                        kendall_flag=sig_t.flag or "POOLED_TEST",
                    )
                )
                key = f"{_fs_name(system)}/{_fs_name(measure_label)}/{_fs_name(name)}.tsv"
                plots[key] = list(zip(truth.tolist(), pooled_vec.tolist()))

    rows.sort(key=lambda r: (r.system, r.measure, r.predictor))
    return EvaluationReport(
        meta=dict(meta or {}), rows=tuple(rows), plots=plots
    )

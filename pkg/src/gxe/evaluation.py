"""Regression and within-environment ranking metrics, selection simulation, model comparison."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from gxe.data import DataError, write_csv
from gxe.mixed_model import fit_ranking_model

log = logging.getLogger(__name__)

MIN_GENOTYPES_PER_ENV = 3
LOWER_IS_BETTER = {"rmse", "mae"}


@dataclass
class PredictionSet:
    genotype_id: np.ndarray
    environment_id: np.ndarray
    y_pred: np.ndarray
    y_true: np.ndarray

    def __post_init__(self):
        self.genotype_id = np.asarray(self.genotype_id, dtype=object)
        self.environment_id = np.asarray(self.environment_id, dtype=object)
        self.y_pred = np.asarray(self.y_pred, dtype=np.float64)
        self.y_true = np.asarray(self.y_true, dtype=np.float64)
        n = len(self.y_pred)
        if not (len(self.genotype_id) == len(self.environment_id) == len(self.y_true) == n):
            raise DataError("prediction columns differ in length")
        if not (np.isfinite(self.y_pred).all() and np.isfinite(self.y_true).all()):
            raise DataError("predictions and observations must be finite")
        keys = set(zip(self.genotype_id, self.environment_id))
        if len(keys) != n:
            raise DataError("duplicate (genotype, environment) pairs in prediction set")

    def __len__(self) -> int:
        return len(self.y_pred)

    @classmethod
    def from_rows(cls, rows) -> "PredictionSet":
        rows = list(rows)
        if not rows:
            return cls([], [], [], [])
        g, e, p, t = zip(*rows)
        return cls(g, e, p, t)

    def subset(self, mask) -> "PredictionSet":
        return PredictionSet(self.genotype_id[mask], self.environment_id[mask], self.y_pred[mask], self.y_true[mask])

    def with_predictions(self, y_pred) -> "PredictionSet":
        return PredictionSet(self.genotype_id, self.environment_id, y_pred, self.y_true)


def read_predictions(path) -> PredictionSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"genotype_id", "environment_id", "y_pred", "y_true"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        rows = [(r["genotype_id"], r["environment_id"], float(r["y_pred"]), float(r["y_true"])) for r in reader]
    return PredictionSet.from_rows(rows)


def write_predictions(path, p: PredictionSet) -> Path:
    rows = zip(p.genotype_id, p.environment_id, p.y_pred, p.y_true)
    return write_csv(path, ["genotype_id", "environment_id", "y_pred", "y_true"], rows)


# ---------------------------------------------------------------- metrics


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; NaN when either series is constant."""
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0.0:
        return float("nan")
    return float(np.clip((da @ db) / den, -1.0, 1.0))


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    return _pearson(stats.rankdata(a), stats.rankdata(b))


def regression_metrics(p: PredictionSet) -> tuple[float, float, float]:
    """(rmse, mae, pearson_r) over pooled rows; r is NaN for a constant series."""
    if len(p) < 2:
        raise DataError("regression metrics need at least two predictions")
    err = p.y_pred - p.y_true
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))), _pearson(p.y_pred, p.y_true)


@dataclass
class EnvMetric:
    environment_id: str
    n: int
    r: float
    rho: float


@dataclass
class MetricReport:
    rmse: float
    mae: float
    pearson_r: float
    r_j: float
    rho_j: float
    per_environment: list[EnvMetric] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)


def _env_groups(p: PredictionSet) -> dict[str, np.ndarray]:
    order = np.argsort(p.environment_id.astype(str), kind="stable")
    envs = p.environment_id[order]
    out = {}
    if len(order) == 0:
        return out
    cuts = np.flatnonzero(envs[1:] != envs[:-1]) + 1
    for chunk in np.split(order, cuts):
        out[p.environment_id[chunk[0]]] = chunk
    return out


def ranking_metrics(p: PredictionSet, min_genotypes: int = MIN_GENOTYPES_PER_ENV):
    """(r_j, rho_j, per-environment list, excluded environments).

    Pearson and Spearman (average ranks) within each environment with at least
    ``min_genotypes`` rows, then the unweighted mean over environments.
    Environments where either series is constant give NaN and are left out of
    the mean.
    """
    table: list[EnvMetric] = []
    excluded: list[str] = []
    for env, idx in _env_groups(p).items():
        if len(idx) < min_genotypes:
            excluded.append(env)
            continue
        yp, yt = p.y_pred[idx], p.y_true[idx]
        table.append(EnvMetric(env, len(idx), _pearson(yp, yt), _spearman(yp, yt)))
    if excluded:
        log.info("excluded %d environments with < %d genotypes from ranking metrics", len(excluded), min_genotypes)
    rs = [m.r for m in table if not math.isnan(m.r)]
    rhos = [m.rho for m in table if not math.isnan(m.rho)]
    if not rs:
        raise DataError(f"no environment has {min_genotypes} or more genotypes with non-constant values")
    return float(np.mean(rs)), float(np.mean(rhos)), table, excluded


def evaluate(p: PredictionSet) -> MetricReport:
    rmse, mae, r = regression_metrics(p)
    r_j, rho_j, table, excluded = ranking_metrics(p)
    return MetricReport(rmse, mae, r, r_j, rho_j, table, excluded)


# ---------------------------------------------------------------- selection


@dataclass
class SelectionReport:
    strategy: str
    fraction: float
    selected: list
    mean_yield_selected: float
    reference_mean: float
    gain: float
    eligible_count: int


def selection_size(fraction: float, n: int) -> int:
    """round-half-up(fraction * n), at least 1."""
    if not 0.0 < fraction <= 1.0:
        raise DataError("fraction must be in (0, 1]")
    return max(1, min(n, int(math.floor(fraction * n + 0.5 + 1e-12))))


def eligible_genotypes(p: PredictionSet, coverage_min: float) -> list[str]:
    envs = set(p.environment_id)
    n_env = len(envs)
    counts: dict[str, int] = {}
    for g in p.genotype_id:
        counts[g] = counts.get(g, 0) + 1
    return sorted(g for g, c in counts.items() if c >= coverage_min * n_env - 1e-12)


def select_global(p: PredictionSet, fraction: float, coverage_min: float = 0.90) -> SelectionReport:
    """Rank eligible genotypes by their genetic effect in a random-genotype model of the predictions."""
    eligible = eligible_genotypes(p, coverage_min)
    if not eligible:
        raise DataError("no genotype meets the environment-coverage requirement")
    k = selection_size(fraction, len(eligible))
    in_el = np.isin(p.genotype_id, np.array(eligible, dtype=object))
    ref = float(np.mean(p.y_true[in_el]))
    if len(eligible) == 1:
        ranking = eligible
    else:
        sub = p.subset(in_el)
        ranking = fit_ranking_model(zip(sub.genotype_id, sub.environment_id, sub.y_pred)).ranking()
    chosen = ranking[:k]
    mask = np.isin(p.genotype_id, np.array(chosen, dtype=object))
    mean_sel = float(np.mean(p.y_true[mask]))
    return SelectionReport("global", fraction, sorted(chosen), mean_sel, ref, mean_sel - ref, len(eligible))


def select_per_environment(p: PredictionSet, fraction: float) -> SelectionReport:
    """Top round(fraction * n_j) genotypes by prediction within each environment."""
    if len(p) == 0:
        raise DataError("empty prediction set")
    mask = np.zeros(len(p), dtype=bool)
    selected = []
    for env, idx in _env_groups(p).items():
        k = selection_size(fraction, len(idx))
        order = sorted(idx, key=lambda i: (-p.y_pred[i], p.genotype_id[i]))
        top = order[:k]
        mask[top] = True
        selected += [(p.genotype_id[i], env) for i in top]
    ref = float(np.mean(p.y_true))
    mean_sel = float(np.mean(p.y_true[mask]))
    return SelectionReport("per_environment", fraction, sorted(selected), mean_sel, ref, mean_sel - ref, len(p))


def gain_curve(replicates: Sequence[PredictionSet], fractions: Sequence[float], coverage_min: float = 0.90):
    """Rows (strategy, fraction, gain, ci95_low, ci95_high); CI is mean +/- 1.96 sd/sqrt(n)."""
    if isinstance(replicates, PredictionSet):
        replicates = [replicates]
    if not fractions:
        raise DataError("gain curve needs at least one fraction")
    rows = []
    for strategy in ("global", "per_environment"):
        for f in fractions:
            if strategy == "global":
                gains = [select_global(p, f, coverage_min).gain for p in replicates]
            else:
                gains = [select_per_environment(p, f).gain for p in replicates]
            mean = float(np.mean(gains))
            if len(gains) > 1:
                half = 1.96 * float(np.std(gains, ddof=1)) / math.sqrt(len(gains))
                lo, hi = mean - half, mean + half
            else:
                lo = hi = float("nan")
            rows.append((strategy, float(f), mean, lo, hi))
    return rows


# ---------------------------------------------------------------- model comparison


def _welch_p(a: np.ndarray, b: np.ndarray) -> float:
    if a.std(ddof=1) == 0 and b.std(ddof=1) == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def _one_sample_p(a: np.ndarray, value: float) -> float:
    if a.std(ddof=1) == 0:
        return 1.0 if a.mean() == value else 0.0
    return float(stats.ttest_1samp(a, value).pvalue)


@dataclass
class ComparisonRow:
    model: str
    metric: str
    mean: float
    sd: float
    n: int
    best: bool
    p_vs_best: float
    literature: float
    p_vs_literature: float


def compare_models(
    replicate_metrics: Mapping[str, Mapping[str, Sequence[float]]],
    literature: Mapping[str, Mapping[str, float]] | None = None,
) -> list[ComparisonRow]:
    """Mean and sd per (model, metric); Welch test against the best model, one-sample test against literature."""
    literature = literature or {}
    metrics = sorted({m for per in replicate_metrics.values() for m in per})
    out: list[ComparisonRow] = []
    for metric in metrics:
        vals = {
            model: np.asarray(per[metric], dtype=np.float64)
            for model, per in replicate_metrics.items()
            if metric in per
        }
        for model, a in vals.items():
            if len(a) < 2:
                raise DataError(f"{model}/{metric}: need at least two replicates")
        sign = -1.0 if metric in LOWER_IS_BETTER else 1.0
        best = max(vals, key=lambda m: (sign * vals[m].mean(), m))
        for model in sorted(vals):
            a = vals[model]
            lit = literature.get(model, {}).get(metric, float("nan"))
            out.append(
                ComparisonRow(
                    model,
                    metric,
                    float(a.mean()),
                    float(a.std(ddof=1)),
                    len(a),
                    model == best,
                    float("nan") if model == best else _welch_p(a, vals[best]),
                    lit,
                    float("nan") if math.isnan(lit) else _one_sample_p(a, lit),
                )
            )
    return out


# ---------------------------------------------------------------- artifacts

METRIC_COLUMNS = ["model", "fold", "replicate", "scenario", "n", "rmse", "mae", "pearson_r", "r_j", "rho_j"]


def metric_row(model: str, fold, replicate, scenario: str, p: PredictionSet) -> list:
    rep = evaluate(p)
    return [model, fold, replicate, scenario, len(p), rep.rmse, rep.mae, rep.pearson_r, rep.r_j, rep.rho_j]


def write_metrics(path, rows) -> Path:
    return write_csv(path, METRIC_COLUMNS, rows)


def write_selection(path, reports: Sequence[SelectionReport]) -> Path:
    rows = (
        (r.strategy, r.fraction, r.eligible_count, len(r.selected), r.mean_yield_selected, r.reference_mean, r.gain)
        for r in reports
    )
    header = ["strategy", "fraction", "eligible", "selected", "mean_yield_selected", "reference_mean", "gain"]
    return write_csv(path, header, rows)


def write_gain_curve(path, rows) -> Path:
    return write_csv(path, ["strategy", "fraction", "gain", "ci95_low", "ci95_high"], rows)


def write_comparison(path, rows: Sequence[ComparisonRow]) -> Path:
    header = ["model", "metric", "mean", "sd", "n", "best", "p_vs_best", "literature", "p_vs_literature"]
    return write_csv(path, header, ((r.model, r.metric, r.mean, r.sd, r.n, int(r.best), r.p_vs_best, r.literature, r.p_vs_literature) for r in rows))

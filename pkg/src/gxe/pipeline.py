"""Model runners shared by the command line and the experiment harness.

Every runner takes a training Dataset (whose genotype/environment tables may
also hold held-out entities) and the cells to predict, and returns one
prediction per cell.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix, hstack
from scipy.sparse.linalg import lsqr

from gxe import kernels, neural
from gxe.data import DataError, Dataset, build_env_vectors
from gxe.evaluation import PredictionSet
from gxe.mixed_model import FAFit, LabelSets, fit_fa, generate_labels

log = logging.getLogger(__name__)

MODELS = ("mixinn", "sinn_style", "gblup", "gxeblup")


def derive_seed(master: int, *keys) -> int:
    """Independent 32-bit seed for a (master, key...) path; keys may be strings or ints."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode()) if not isinstance(k, (int, np.integer)) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def with_env_vectors(d: Dataset, train_envs: Sequence[str]) -> Dataset:
    """Standardize every environment with statistics from ``train_envs`` only."""
    train_tab = d.environments.subset(list(train_envs))
    _, stats = build_env_vectors(train_tab)
    env, _ = build_env_vectors(d.environments, stats)
    return replace(d, environments=env)


@dataclass(frozen=True)
class Cells:
    """Held-out cells with replicate-averaged observed yields."""

    genotype_ids: list
    environment_ids: list
    y_true: np.ndarray

    def prediction_set(self, y_pred) -> PredictionSet:
        return PredictionSet(self.genotype_ids, self.environment_ids, y_pred, self.y_true)


def cell_targets(test: Dataset) -> Cells:
    gs, es, cnt, s1, _ = test.cell_stats(sorted(set(test.genotype_id)), sorted(set(test.environment_id)))
    gi, ej = np.nonzero(cnt)
    return Cells([gs[i] for i in gi], [es[j] for j in ej], s1[gi, ej] / cnt[gi, ej])


# ---------------------------------------------------------------- label sets


def decompose(train: Dataset, r: int = 2, tol: float = 1e-8, max_iter: int = 500, seed: int = 0) -> tuple[FAFit, LabelSets]:
    fit = fit_fa(train, r=r, tol=tol, max_iter=max_iter, seed=seed)
    return fit, generate_labels(fit, train)


def anova_labels(train: Dataset) -> LabelSets:
    """Labels from a two-way fixed main-effects fit; interaction labels are cell residuals."""
    gs, es = train.genotype_order(), train.environment_order()
    gpos = {g: i for i, g in enumerate(gs)}
    epos = {e: j for j, e in enumerate(es)}
    gi = np.fromiter((gpos[g] for g in train.genotype_id), np.intp, train.n_s)
    ej = np.fromiter((epos[e] for e in train.environment_id), np.intp, train.n_s)
    n = train.n_s
    rows = np.arange(n)
    Xg = csr_matrix((np.ones(n), (rows, gi)), shape=(n, len(gs)))
    Xe = csr_matrix((np.ones(n), (rows, ej)), shape=(n, len(es)))
    y = train.y
    mu = float(y.mean())
    sol = lsqr(hstack([Xg, Xe]).tocsr(), y - mu, atol=1e-14, btol=1e-14, iter_lim=10000)[0]
    a, b = sol[: len(gs)], sol[len(gs) :]
    mu += a.mean() + b.mean()
    a, b = a - a.mean(), b - b.mean()
    _, _, cnt, s1, _ = train.cell_stats(gs, es)
    with np.errstate(invalid="ignore", divide="ignore"):
        cell_mean = s1 / cnt
    y_ge = np.where(cnt > 0, cell_mean - mu - a[:, None] - b[None, :], np.nan)
    return LabelSets(mu, gs, es, a, b, y_ge)


# ---------------------------------------------------------------- neural models


def fit_neural(train: Dataset, labels: LabelSets, cfgs: neural.StageConfigs, seed: int) -> neural.Models:
    return neural.structured_fit(train, labels, cfgs, seed=seed)


def neural_predict(models: neural.Models, d: Dataset, gids, eids, interaction: bool = True) -> np.ndarray:
    xg = neural.genotype_features(d, gids)
    xe = neural.environment_features(d, eids)
    return neural.predict_yield(models, models.mu_hat, xg, xe, interaction=interaction)


# ---------------------------------------------------------------- kernel models


def kernel_matrices(d: Dataset, center: bool = True):
    return kernels.genomic_relationship(d.genotypes, center), kernels.environmental_relationship(d.environments, center)


def fit_kernel_model(kind: str, train: Dataset, d_all: Dataset, fraction: float = 1.0, seed: int = 0) -> kernels.KernelFit:
    Kg, Ke = kernel_matrices(d_all)
    if kind == "gblup":
        return kernels.fit_gblup(train, Kg)
    if fraction < 1.0:
        train = kernels.subsample_for_budget(train, fraction, seed)
    return kernels.fit_gxeblup(train, Kg, Ke)


# ---------------------------------------------------------------- one train/test run


@dataclass
class RunSettings:
    cfgs: neural.StageConfigs = neural.DESK
    r: int = 2
    fa_tol: float = 1e-8
    fa_max_iter: int = 500
    gxeblup_fraction: float = 1.0


def run_models(
    names: Sequence[str],
    train: Dataset,
    cells: Cells,
    seed: int,
    settings: RunSettings | None = None,
) -> dict[str, np.ndarray]:
    """Fit each named model on ``train`` and predict ``cells``.

    ``train.environments`` must cover the held-out environments; env vectors
    are (re)built from training-environment statistics. ``mixinn`` also yields
    its additive ablation under ``mixinn_additive``.
    """
    settings = settings or RunSettings()
    unknown = set(names) - set(MODELS)
    if unknown:
        raise DataError(f"unknown models {sorted(unknown)}; choose from {list(MODELS)}")
    train = with_env_vectors(train, train.environment_order())
    out: dict[str, np.ndarray] = {}
    g, e = cells.genotype_ids, cells.environment_ids
    for name in names:
        s = derive_seed(seed, name)
        if name in ("mixinn", "sinn_style"):
            if name == "mixinn":
                _, labels = decompose(train, settings.r, settings.fa_tol, settings.fa_max_iter, seed=s)
            else:
                labels = anova_labels(train)
            models = fit_neural(train, labels, settings.cfgs, seed=s)
            out[name] = neural_predict(models, train, g, e)
            if name == "mixinn":
                out["mixinn_additive"] = neural_predict(models, train, g, e, interaction=False)
        else:
            fit = fit_kernel_model(name, train, train, settings.gxeblup_fraction, seed=s)
            out[name] = fit.predict_many(g, e if name == "gxeblup" else None)
    return out

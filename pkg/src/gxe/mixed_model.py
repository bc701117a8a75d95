"""Factor-analytic linear mixed model for multi-environment trials.

    y_ijk = mu + G_i + E_j + GE_ij + e_ijk
    G ~ N(0, s2_g I),  GE_i. ~ N(0, Lambda Lambda' + Psi),  e_ijk ~ N(0, s2_j)

E_j is fixed. The REML likelihood is evaluated with cell-means coding of the
fixed effects (X = environment indicators); environment effects are reported
under a sum-to-zero constraint with mu the mean of the environment means.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from gxe import _kernel
from gxe.data import DataError, Dataset, write_csv
from gxe.optim import minimize_bfgs

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """Raised when the model covariance or fixed-effect design is not usable."""


@dataclass
class FAParams:
    mu: float
    env_fixed: np.ndarray
    sigma_g2: float
    Lambda: np.ndarray  # (n_e, r), Lambda[j, k] = 0 for k > j
    Psi: np.ndarray  # (n_e,) diagonal
    resid_vars: np.ndarray  # (n_e,)

    @property
    def sigma_e(self) -> np.ndarray:
        return self.Lambda @ self.Lambda.T + np.diag(self.Psi)

    def covariance_factor(self) -> np.ndarray:
        n_e = len(self.Psi)
        return np.hstack([np.full((n_e, 1), math.sqrt(self.sigma_g2)), self.Lambda])

    def validate(self) -> None:
        bad = []
        if not self.sigma_g2 >= 0:
            bad.append(f"sigma_g2={self.sigma_g2}")
        if not np.all(self.Psi >= 0):
            bad.append(f"Psi min={self.Psi.min()}")
        if not np.all(self.resid_vars > 0):
            bad.append(f"resid_vars min={self.resid_vars.min()}")
        if not np.all(np.isfinite(self.Lambda)):
            bad.append("Lambda not finite")
        if bad:
            raise NumericalError("covariance not positive definite: " + ", ".join(bad))


@dataclass
class FAFit:
    params: FAParams
    genotype_ids: list[str]
    environment_ids: list[str]
    blup_G: np.ndarray
    blup_GE: np.ndarray
    cell_pred: np.ndarray
    reml_loglik: float
    converged: bool
    iterations: int
    trace: list[float] = field(default_factory=list)


@dataclass
class LabelSets:
    mu_hat: float
    genotype_ids: list[str]
    environment_ids: list[str]
    y_g: np.ndarray
    y_e: np.ndarray
    y_ge: np.ndarray


@dataclass
class RankingFit:
    genotype_ids: list[str]
    environment_ids: list[str]
    env_means: np.ndarray
    genetic_effects: np.ndarray
    sigma_g2: float
    resid_var: float

    def ranking(self) -> list[str]:
        """Genotype ids by decreasing genetic effect, ties by id."""
        order = sorted(range(len(self.genotype_ids)), key=lambda i: (-self.genetic_effects[i], self.genotype_ids[i]))
        return [self.genotype_ids[i] for i in order]


# ---------------------------------------------------------------- REML core


@dataclass
class Cells:
    """Cell sufficient statistics, centered per environment for conditioning."""

    genotype_ids: list[str]
    environment_ids: list[str]
    cnt: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    center: np.ndarray
    n_obs: int
    phen_var: float
    env_var: np.ndarray

    @classmethod
    def from_stats(cls, gs, es, cnt, s1, s2) -> "Cells":
        n_env = cnt.sum(axis=0)
        if (n_env == 0).any():
            empty = [es[j] for j in np.flatnonzero(n_env == 0)]
            raise DataError(f"singular fixed-effect design: no data for environments {empty}")
        center = s1.sum(axis=0) / n_env
        s2c = s2 - 2.0 * center * s1 + cnt * center**2
        s1c = s1 - cnt * center
        n = int(cnt.sum())
        total = s1.sum()
        phen_var = float((s2.sum() - total**2 / n) / max(n - 1, 1))
        env_var = np.where(n_env > 1, s2c.sum(axis=0) / np.maximum(n_env - 1, 1), phen_var)
        return cls(list(gs), list(es), cnt, s1c, np.maximum(s2c, 0.0), center, n, max(phen_var, 0.0), env_var)

    @classmethod
    def from_dataset(cls, d: Dataset, genotypes=None, environments=None) -> "Cells":
        if d.n_s == 0:
            raise DataError("dataset has no observations")
        if np.isnan(d.y).any():
            raise DataError("dataset contains missing yields; filter first")
        return cls.from_stats(*d.cell_stats(genotypes, environments))


@dataclass
class RemlTerms:
    loglik: float
    beta: np.ndarray  # environment means (uncentered)
    A: np.ndarray
    e: np.ndarray | None = None  # (n_g, n_e): Z_i' V_i^-1 (y_i - X_i beta)
    grad_C: np.ndarray | None = None  # d loglik / d C (symmetric convention)
    grad_resid: np.ndarray | None = None


def reml_terms(cells: Cells, U, psi, rvar, grad=False, blup=False, kernel=None) -> RemlTerms:
    """REML log-likelihood for C = U U' + diag(psi), residual variances rvar."""
    k = kernel or _kernel.kernel
    U = np.ascontiguousarray(U, dtype=np.float64)
    psi = np.ascontiguousarray(psi, dtype=np.float64)
    rvar = np.ascontiguousarray(rvar, dtype=np.float64)
    if not np.all(rvar > 0) or not np.all(psi >= 0):
        raise NumericalError(
            f"covariance not positive definite: min residual variance {rvar.min()}, min psi {psi.min()}"
        )
    logdet_b, logdet_k, yvy, A, b, Ut, delta, t = k.pass1(cells.cnt, cells.s1, cells.s2, U, psi, rvar)
    try:
        cf = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("X'V^-1X is not positive definite") from None
    beta = linalg.cho_solve(cf, b)
    ypy = yvy - b @ beta
    logdet_a = 2.0 * np.log(np.diag(cf[0])).sum()
    p = A.shape[0]
    ll = -0.5 * ((cells.n_obs - p) * LOG_2PI + logdet_b + logdet_k + logdet_a + ypy)
    out = RemlTerms(float(ll), beta + cells.center, A)
    if grad or blup:
        Ainv = np.ascontiguousarray(linalg.cho_solve(cf, np.eye(p)))
        e, S, resid = k.pass2(cells.cnt, cells.s1, cells.s2, U, psi, rvar, np.ascontiguousarray(beta), Ainv, Ut, delta, t, grad)
        out.e = e
        if grad:
            out.grad_C = -0.5 * (A - S - e.T @ e)
            out.grad_resid = -0.5 * resid
    return out


def restricted_log_likelihood(d: Dataset, p: FAParams) -> float:
    """REML log-likelihood of the observed yields under the FA model."""
    p.validate()
    cells = Cells.from_dataset(d)
    if len(p.Psi) != len(cells.environment_ids):
        raise DataError("parameter dimension does not match the number of environments")
    return reml_terms(cells, p.covariance_factor(), p.Psi, p.resid_vars).loglik


# ---------------------------------------------------------------- FA fit


def _free_mask(n_e: int, r: int) -> np.ndarray:
    return np.tril(np.ones((n_e, r), dtype=bool))


class _FAObjective:
    """Negative REML in log-variance / free-loading coordinates."""

    def __init__(self, cells: Cells, r: int, floor: float):
        self.cells = cells
        self.n_e = len(cells.environment_ids)
        self.r = r
        self.floor = floor
        self.mask = _free_mask(self.n_e, r)
        self.n_lam = int(self.mask.sum())

    def unpack(self, theta):
        n_e, fl = self.n_e, self.floor
        s2g = fl + math.exp(theta[0])
        lam = np.zeros((n_e, self.r))
        lam[self.mask] = theta[1 : 1 + self.n_lam]
        k = 1 + self.n_lam
        psi = fl + np.exp(theta[k : k + n_e])
        rvar = fl + np.exp(theta[k + n_e : k + 2 * n_e])
        return s2g, lam, psi, rvar

    def pack(self, s2g, lam, psi, rvar):
        fl = self.floor
        lv = lambda v: np.log(np.maximum(np.asarray(v, dtype=float) - fl, fl * 1e-3))
        return np.concatenate([[lv(s2g)], lam[self.mask], lv(psi), lv(rvar)])

    def __call__(self, theta):
        if np.max(np.abs(theta[[0]])) > 700 or np.max(theta[1 + self.n_lam :]) > 700:
            raise NumericalError("variance parameter overflow")
        s2g, lam, psi, rvar = self.unpack(theta)
        U = np.hstack([np.full((self.n_e, 1), math.sqrt(s2g)), lam])
        rt = reml_terms(self.cells, U, psi, rvar, grad=True)
        G = rt.grad_C
        k = 1 + self.n_lam
        grad = np.empty_like(theta)
        grad[0] = G.sum() * (s2g - self.floor)
        grad[1:k] = (2.0 * G @ lam)[self.mask]
        grad[k : k + self.n_e] = np.diag(G) * (psi - self.floor)
        grad[k + self.n_e :] = rt.grad_resid * (rvar - self.floor)
        return -rt.loglik, -grad


def fit_fa(d: Dataset, r: int = 2, tol: float = 1e-8, max_iter: int = 500, seed: int = 0) -> FAFit:
    """Fit the FA(r) mixed model by REML, then compute BLUPs for the full grid."""
    cells = Cells.from_dataset(d)
    n_g, n_e = cells.cnt.shape
    if n_e < r + 1:
        raise DataError(f"need at least r + 1 = {r + 1} environments, got {n_e}")
    if (cells.cnt.sum(axis=1) == 0).any():
        raise DataError("every genotype must be observed at least once")
    vp = cells.phen_var
    if vp <= 0:
        raise NumericalError("yields have zero variance")
    floor = 1e-10 * vp
    obj = _FAObjective(cells, r, floor)
    rng = np.random.default_rng(seed)
    lam0 = rng.normal(0.0, math.sqrt(0.01 * vp), size=(n_e, r)) * obj.mask
    theta0 = obj.pack(0.25 * vp, lam0, np.full(n_e, 0.25 * vp), np.maximum(cells.env_var, 1e-3 * vp))
    res = minimize_bfgs(obj, theta0, tol=tol, max_iter=max_iter)
    if not res.converged:
        log.warning("FA fit did not converge (%d iterations)", res.iterations)
    s2g, lam, psi, rvar = obj.unpack(res.x)
    beta_mu = 0.0
    params = FAParams(beta_mu, np.zeros(n_e), s2g, lam, psi, rvar)
    G, GE, env_fixed, mu, ll = _blups(cells, params)
    params.mu, params.env_fixed = mu, env_fixed
    at_floor = [name for name, v in (("sigma_g2", s2g),) if v <= 2 * floor] + [
        f"psi[{cells.environment_ids[j]}]" for j in np.flatnonzero(psi <= 2 * floor)
    ]
    if at_floor:
        log.info("boundary estimates (variance at floor): %s", at_floor)
    cell_pred = mu + G[:, None] + env_fixed[None, :] + GE
    return FAFit(
        params,
        cells.genotype_ids,
        cells.environment_ids,
        G,
        GE,
        cell_pred,
        ll,
        res.converged,
        res.iterations,
        [-f for f in res.trace],
    )


def _blups(cells: Cells, p: FAParams):
    U = p.covariance_factor()
    rt = reml_terms(cells, U, p.Psi, p.resid_vars, blup=True)
    G = p.sigma_g2 * rt.e.sum(axis=1)
    GE = rt.e @ p.sigma_e  # sigma_e symmetric
    mu = float(rt.beta.mean())
    return G, GE, rt.beta - mu, mu, rt.loglik


def solve_mme(d: Dataset, p: FAParams):
    """BLUPs and fixed effects at fixed variance components.

    Returns (blup_G, blup_GE, env_fixed, mu) over the dataset's genotype and
    environment order.
    """
    p.validate()
    cells = Cells.from_dataset(d)
    G, GE, env_fixed, mu, _ = _blups(cells, p)
    return G, GE, env_fixed, mu


# ---------------------------------------------------------------- labels


def generate_labels(fit: FAFit, d: Dataset) -> LabelSets:
    """Genotype, environment and interaction targets from the corrected grid."""
    yhat = fit.cell_pred
    if np.isnan(yhat).any():
        raise DataError("cell predictions must cover the full grid")
    mu_hat = float(np.mean(d.y))
    y_g = yhat.mean(axis=1) - mu_hat
    y_e = yhat.mean(axis=0) - mu_hat
    y_ge = yhat - mu_hat - y_g[:, None] - y_e[None, :]
    return LabelSets(mu_hat, list(fit.genotype_ids), list(fit.environment_ids), y_g, y_e, y_ge)


# ---------------------------------------------------------------- ranking model


class _RankingObjective:
    def __init__(self, cells: Cells, floor: float):
        self.cells = cells
        self.floor = floor
        self.n_e = len(cells.environment_ids)

    def unpack(self, theta):
        return self.floor + math.exp(theta[0]), self.floor + math.exp(theta[1])

    def __call__(self, theta):
        if np.max(theta) > 700:
            raise NumericalError("variance parameter overflow")
        s2g, s2e = self.unpack(theta)
        U = np.full((self.n_e, 1), math.sqrt(s2g))
        rt = reml_terms(self.cells, U, np.zeros(self.n_e), np.full(self.n_e, s2e), grad=True)
        g = np.array([rt.grad_C.sum() * (s2g - self.floor), rt.grad_resid.sum() * (s2e - self.floor)])
        return -rt.loglik, -g


def fit_ranking_model(preds: Iterable[tuple[str, str, float]]) -> RankingFit:
    """REML fit of y_ij = mu_j + G_i + e with random G; G_i used for ranking."""
    rows = list(preds)
    gids = np.array([r[0] for r in rows], dtype=object)
    eids = np.array([r[1] for r in rows], dtype=object)
    y = np.array([r[2] for r in rows], dtype=np.float64)
    gs = sorted(set(gids))
    es = sorted(set(eids))
    if len(gs) < 2:
        raise DataError("ranking model needs at least two genotypes")
    gi = np.searchsorted(np.array(gs, dtype=object), gids)
    ej = np.searchsorted(np.array(es, dtype=object), eids)
    cnt = np.zeros((len(gs), len(es)))
    s1 = np.zeros_like(cnt)
    s2 = np.zeros_like(cnt)
    np.add.at(cnt, (gi, ej), 1.0)
    np.add.at(s1, (gi, ej), y)
    np.add.at(s2, (gi, ej), y * y)
    env_means = s1.sum(axis=0) / cnt.sum(axis=0)
    resid_ss = s2.sum() - (s1.sum(axis=0) ** 2 / cnt.sum(axis=0)).sum()
    if resid_ss <= 1e-12 * max(1.0, float(s2.sum())):
        return RankingFit(gs, es, env_means, np.zeros(len(gs)), 0.0, 0.0)
    cells = Cells.from_stats(gs, es, cnt, s1, s2)
    if cells.n_obs <= len(es):
        raise DataError("ranking model needs more observations than environments")
    vp = max(float(resid_ss / (cells.n_obs - len(es))), 1e-300)
    floor = 1e-10 * vp
    obj = _RankingObjective(cells, floor)
    theta0 = np.log([0.5 * vp, 0.5 * vp])
    res = minimize_bfgs(obj, theta0, tol=1e-12, max_iter=200)
    s2g, s2e = obj.unpack(res.x)
    rt = reml_terms(cells, np.full((len(es), 1), math.sqrt(s2g)), np.zeros(len(es)), np.full(len(es), s2e), blup=True)
    G = s2g * rt.e.sum(axis=1)
    return RankingFit(gs, es, rt.beta, G, s2g, s2e)


# ---------------------------------------------------------------- artifacts


def write_fa_fit(path, fit: FAFit) -> Path:
    p = fit.params
    rows = [("mu", "", "", p.mu), ("sigma_g2", "", "", p.sigma_g2)]
    for j, e in enumerate(fit.environment_ids):
        rows.append(("env_fixed", e, "", p.env_fixed[j]))
        rows.append(("psi", e, "", p.Psi[j]))
        rows.append(("resid_var", e, "", p.resid_vars[j]))
        for k in range(p.Lambda.shape[1]):
            rows.append(("lambda", e, k + 1, p.Lambda[j, k]))
    rows += [
        ("reml_loglik", "", "", fit.reml_loglik),
        ("converged", "", "", int(fit.converged)),
        ("iterations", "", "", fit.iterations),
    ]
    return write_csv(path, ["parameter", "environment_id", "factor", "value"], rows)


def write_blups(path, fit: FAFit) -> Path:
    rows = (
        (g, e, fit.blup_G[i], fit.blup_GE[i, j], fit.cell_pred[i, j])
        for i, g in enumerate(fit.genotype_ids)
        for j, e in enumerate(fit.environment_ids)
    )
    return write_csv(path, ["genotype_id", "environment_id", "blup_G", "blup_GE", "cell_pred"], rows)


def write_labels(path, labels: LabelSets) -> Path:
    rows = (
        (g, e, labels.y_g[i], labels.y_e[j], labels.y_ge[i, j], labels.mu_hat)
        for i, g in enumerate(labels.genotype_ids)
        for j, e in enumerate(labels.environment_ids)
    )
    return write_csv(path, ["genotype_id", "environment_id", "y_g", "y_e", "y_ge", "mu_hat"], rows)


def read_labels(path) -> LabelSets:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no label rows")
    gs: dict[str, int] = {}
    es: dict[str, int] = {}
    for r in rows:
        gs.setdefault(r["genotype_id"], len(gs))
        es.setdefault(r["environment_id"], len(es))
    y_g = np.zeros(len(gs))
    y_e = np.zeros(len(es))
    y_ge = np.full((len(gs), len(es)), np.nan)
    for r in rows:
        i, j = gs[r["genotype_id"]], es[r["environment_id"]]
        y_g[i] = float(r["y_g"])
        y_e[j] = float(r["y_e"])
        y_ge[i, j] = float(r["y_ge"]) if r["y_ge"] else np.nan
    return LabelSets(float(rows[0]["mu_hat"]), list(gs), list(es), y_g, y_e, y_ge)

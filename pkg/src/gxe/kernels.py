"""Kernel baselines: GBLUP and G x E BLUP with marker/environment relationship matrices.

Both models are fitted by REML on group means (genotype means for GBLUP,
genotype-environment cell means for G x E BLUP). Replicates only enter
through the residual term, so the collapsed likelihood equals the full-data
one. Covariances are assembled on observed groups by indexing the relationship
matrices; the full Kronecker product is never formed.
"""

from __future__ import annotations

import logging
import math
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from gxe.data import DataError, Dataset, EnvironmentTable, GenotypeTable, _codes, write_csv
from gxe.mixed_model import LOG_2PI, NumericalError
from gxe.optim import minimize_bfgs

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET = 2 * 1024**3  # bytes


class BudgetError(DataError):
    """The dense group covariance would not fit in the memory budget."""


@dataclass
class RelationshipMatrix:
    ids: list[str]
    K: np.ndarray

    def __post_init__(self):
        self.ids = list(self.ids)
        self._index = {k: i for i, k in enumerate(self.ids)}

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def positions(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._index[k] for k in ids], dtype=np.intp)
        except KeyError as exc:
            raise DataError(f"identifier {exc.args[0]!r} is not in the relationship matrix") from None


def _relationship(ids, X: np.ndarray, center: bool, what: str) -> RelationshipMatrix:
    X = np.asarray(X, dtype=np.float64)
    if not np.any(X):
        raise DataError(f"{what} matrix is all zero")
    if center:
        X = X - X.mean(axis=0)
    XXt = X @ X.T
    tr = np.trace(XXt)
    if not tr > 0:
        raise DataError(f"{what} matrix has no variation")
    K = XXt / (tr / X.shape[0])
    return RelationshipMatrix(ids, 0.5 * (K + K.T))


def genomic_relationship(g: GenotypeTable, center: bool = True) -> RelationshipMatrix:
    """Sigma_g = X X' / (tr(X X') / n_g) on (optionally column-centered) markers."""
    if (g.markers < -1).any():
        raise DataError("markers contain missing values; impute first")
    return _relationship(g.ids, g.markers, center, "marker")


def environmental_relationship(e: EnvironmentTable, center: bool = True) -> RelationshipMatrix:
    if e.env_vector is None:
        raise DataError("environment vectors not built; call build_env_vectors first")
    return _relationship(e.ids, e.env_vector, center, "environment feature")


# ---------------------------------------------------------------- dense REML on group means


@dataclass
class _Groups:
    """Group means with the within-group residual sum of squares."""

    ybar: np.ndarray
    w: np.ndarray
    ss_within: float
    n_obs: int


def _group(keys: np.ndarray, y: np.ndarray, n_groups: int) -> _Groups:
    w = np.bincount(keys, minlength=n_groups).astype(np.float64)
    s1 = np.bincount(keys, weights=y, minlength=n_groups)
    s2 = np.bincount(keys, weights=y * y, minlength=n_groups)
    ybar = s1 / w
    ss = float(np.maximum(s2 - s1 * ybar, 0.0).sum())
    return _Groups(ybar, w, ss, len(y))


@dataclass
class _Reml:
    loglik: float
    mu: float
    alpha: np.ndarray  # P ybar = V^-1 (ybar - mu)
    grad: np.ndarray | None = None


def _reml(gr: _Groups, kernels: list[np.ndarray], theta: np.ndarray, s2e: float, grad: bool = False) -> _Reml:
    n_c = len(gr.ybar)
    V = np.diag(s2e / gr.w)
    for t, K in zip(theta, kernels):
        V += t * K
    try:
        cf = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("group covariance is not positive definite") from None
    ones = np.ones(n_c)
    vi1 = linalg.cho_solve(cf, ones)
    vy = linalg.cho_solve(cf, gr.ybar)
    a = ones @ vi1
    mu = float(ones @ vy / a)
    alpha = vy - mu * vi1
    within_df = gr.n_obs - n_c
    ll = -0.5 * (
        (gr.n_obs - 1) * LOG_2PI
        + 2.0 * np.log(np.diag(cf[0])).sum()
        + np.log(gr.w).sum()
        + (within_df * math.log(s2e) if within_df else 0.0)
        + gr.ss_within / s2e
        + math.log(a)
        + gr.ybar @ alpha
    )
    out = _Reml(float(ll), mu, alpha)
    if grad:
        Vinv = linalg.cho_solve(cf, np.eye(n_c))
        P = Vinv - np.outer(vi1, vi1) / a
        g = np.empty(len(kernels) + 1)
        for k, K in enumerate(kernels):
            g[k] = -0.5 * (np.sum(P * K) - alpha @ K @ alpha)
        g[-1] = -0.5 * (np.diag(P) @ (1.0 / gr.w) - alpha @ (alpha / gr.w))
        g[-1] += -0.5 * (within_df / s2e - gr.ss_within / s2e**2)
        out.grad = g
    return out


def _fit_variances(gr: _Groups, kernels: list[np.ndarray], tol: float, max_iter: int):
    """REML variance components (kernel variances..., residual) by BFGS in log scale."""
    n_c = len(gr.ybar)
    vp = float(np.var(gr.ybar)) if n_c > 1 else 0.0
    vp = max(vp, gr.ss_within / max(gr.n_obs - n_c, 1), 1e-12)
    floor = 1e-10 * vp
    n_k = len(kernels)

    def unpack(x):
        v = floor + np.exp(x)
        return v[:n_k], float(v[n_k])

    def fun(x):
        if np.max(x) > 700:
            raise NumericalError("variance parameter overflow")
        theta, s2e = unpack(x)
        r = _reml(gr, kernels, theta, s2e, grad=True)
        return -r.loglik, -r.grad * (np.append(theta, s2e) - floor)

    x0 = np.log(np.full(n_k + 1, vp / (n_k + 1)))
    res = minimize_bfgs(fun, x0, tol=tol, max_iter=max_iter)
    if not res.converged:
        log.warning("kernel REML did not converge in %d iterations", max_iter)
    theta, s2e = unpack(res.x)
    return theta, s2e, res


def _check_budget(n_c: int, n_kernels: int, budget: int) -> None:
    need = 8 * n_c * n_c * (n_kernels + 3)
    if need > budget:
        raise BudgetError(
            f"G x E BLUP on {n_c} groups needs about {need / 1024**3:.1f} GiB (budget "
            f"{budget / 1024**3:.1f} GiB); subsample the data with subsample_for_budget"
        )


# ---------------------------------------------------------------- fits


@dataclass
class KernelFit:
    kind: str  # "gblup" or "gxeblup"
    mu: float
    variance_components: dict[str, float]
    genotype_ids: list[str]
    genotype_effects: np.ndarray  # over every genotype in Kg
    environment_ids: list[str] = field(default_factory=list)
    environment_effects: np.ndarray | None = None  # over every environment in Ke
    reml_loglik: float = float("nan")
    converged: bool = True
    # G x E pieces: Kg[:, gc] and Ke[:, ec] scaled by alpha, used on demand
    _ge_left: np.ndarray | None = None
    _ge_right: np.ndarray | None = None

    def _gpos(self, ids):
        idx = {g: i for i, g in enumerate(self.genotype_ids)}
        try:
            return np.array([idx[g] for g in ids], dtype=np.intp)
        except KeyError as exc:
            raise DataError(f"genotype {exc.args[0]!r} is not in the relationship matrix") from None

    def _epos(self, ids):
        idx = {e: j for j, e in enumerate(self.environment_ids)}
        try:
            return np.array([idx[e] for e in ids], dtype=np.intp)
        except KeyError as exc:
            raise DataError(f"environment {exc.args[0]!r} is not in the relationship matrix") from None

    def predict_many(self, genotype_ids: Sequence[str], environment_ids: Sequence[str] | None = None) -> np.ndarray:
        gi = self._gpos(genotype_ids)
        out = self.mu + self.genotype_effects[gi]
        if self.kind == "gblup":
            return out
        if environment_ids is None:
            raise DataError("G x E BLUP predictions need environment ids")
        ej = self._epos(environment_ids)
        out = out + self.environment_effects[ej]
        s2ge = self.variance_components["sigma_ge2"]
        if s2ge > 0:
            out = out + s2ge * np.einsum("nc,nc->n", self._ge_left[gi], self._ge_right[ej])
        return out

    def predict(self, genotype_id: str, environment_id: str | None = None) -> float:
        return float(self.predict_many([genotype_id], None if environment_id is None else [environment_id])[0])


def _clean(d: Dataset) -> Dataset:
    if d.n_s == 0:
        raise DataError("dataset has no observations")
    ok = ~np.isnan(d.y)
    return d if ok.all() else d.subset(ok)


def fit_gblup(
    d: Dataset,
    Kg: RelationshipMatrix,
    variances: tuple[float, float] | None = None,
    tol: float = 1e-9,
    max_iter: int = 300,
) -> KernelFit:
    """y = mu + g + e, g ~ N(0, s2_g Kg). ``variances=(s2_g, s2_eps)`` skips REML."""
    d = _clean(d)
    gs = d.genotype_order()
    pos = Kg.positions(gs)
    keys = _codes(d.genotype_id, gs)
    gr = _group(keys, d.y, len(gs))
    kernels = [Kg.K[np.ix_(pos, pos)]]
    if len(gs) < 2 and variances is None:
        raise DataError("GBLUP needs at least two genotypes")
    if variances is None:
        theta, s2e, res = _fit_variances(gr, kernels, tol, max_iter)
        converged = res.converged
    else:
        theta, s2e, converged = np.array([variances[0]], float), float(variances[1]), True
    if s2e <= 0 or theta[0] < 0:
        raise NumericalError("variance components must be s2_g >= 0 and s2_eps > 0")
    r = _reml(gr, kernels, theta, s2e)
    g_all = theta[0] * (Kg.K[:, pos] @ r.alpha)
    return KernelFit(
        "gblup",
        r.mu,
        {"sigma_g2": float(theta[0]), "sigma_eps2": s2e},
        list(Kg.ids),
        g_all,
        reml_loglik=r.loglik,
        converged=converged,
    )


def fit_gxeblup(
    d: Dataset,
    Kg: RelationshipMatrix,
    Ke: RelationshipMatrix,
    variances: tuple[float, float, float, float] | None = None,
    tol: float = 1e-9,
    max_iter: int = 300,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> KernelFit:
    """y = mu + g + e + ge + eps with ge ~ N(0, s2_ge Kg (x) Ke).

    ``variances=(s2_g, s2_e, s2_ge, s2_eps)`` skips REML.
    """
    d = _clean(d)
    gs, es = d.genotype_order(), d.environment_order()
    gi = _codes(d.genotype_id, gs)
    ej = _codes(d.environment_id, es)
    cell = gi * len(es) + ej
    uniq, keys = np.unique(cell, return_inverse=True)
    n_c = len(uniq)
    _check_budget(n_c, 3, memory_budget)
    gr = _group(keys, d.y, n_c)
    gpos = Kg.positions(gs)[uniq // len(es)]
    epos = Ke.positions(es)[uniq % len(es)]
    Kgc = Kg.K[np.ix_(gpos, gpos)]
    Kec = Ke.K[np.ix_(epos, epos)]
    kernels = [Kgc, Kec, Kgc * Kec]
    if variances is None:
        if len(gs) < 2 or len(es) < 2:
            raise DataError("G x E BLUP needs at least two genotypes and two environments")
        theta, s2e, res = _fit_variances(gr, kernels, tol, max_iter)
        converged = res.converged
    else:
        theta, s2e, converged = np.array(variances[:3], float), float(variances[3]), True
    if s2e <= 0 or (theta < 0).any():
        raise NumericalError("variance components must be non-negative with s2_eps > 0")
    r = _reml(gr, kernels, theta, s2e)
    left = Kg.K[:, gpos]
    right = Ke.K[:, epos]
    return KernelFit(
        "gxeblup",
        r.mu,
        {"sigma_g2": float(theta[0]), "sigma_e2": float(theta[1]), "sigma_ge2": float(theta[2]), "sigma_eps2": s2e},
        list(Kg.ids),
        theta[0] * (left @ r.alpha),
        list(Ke.ids),
        theta[1] * (right @ r.alpha),
        r.loglik,
        converged,
        left * r.alpha[None, :],
        right,
    )


# ---------------------------------------------------------------- subsampling


def subsample_for_budget(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Shrink ``d`` to about ``fraction`` of its records.

    Replicates are collapsed first (smallest replicate index kept per cell);
    then records are removed from the most frequently observed genotypes, one
    per genotype per round, until the target count is reached.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return d
    target = int(round(fraction * d.n_s))
    order = np.lexsort((d.replicate, d.environment_id.astype(str), d.genotype_id.astype(str)))
    g_s, e_s = d.genotype_id[order], d.environment_id[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (g_s[1:] != g_s[:-1]) | (e_s[1:] != e_s[:-1])
    keep = np.zeros(d.n_s, dtype=bool)
    keep[order[first]] = True
    n_keep = int(keep.sum())
    if n_keep <= target:
        return d.subset(keep)

    rng = np.random.default_rng(seed)
    gs = sorted(set(d.genotype_id[keep]))
    es = sorted(set(d.environment_id[keep]))
    rec = np.flatnonzero(keep)
    g_code = _codes(d.genotype_id[rec], gs)
    e_code = _codes(d.environment_id[rec], es)
    g_count = np.bincount(g_code, minlength=len(gs))
    e_count = np.bincount(e_code, minlength=len(es))
    if target < max(len(gs), len(es)):
        raise DataError(f"fraction {fraction} would remove every record of some genotype or environment")
    # per-genotype removal queues in seeded random order
    queues: list[list[int]] = [[] for _ in gs]
    for k in rng.permutation(len(rec)):
        queues[g_code[k]].append(int(k))
    removed = np.zeros(len(rec), dtype=bool)
    to_remove = n_keep - target
    while to_remove > 0:
        top = int(g_count.max())
        if top <= 1:
            raise DataError(f"fraction {fraction} would remove every record of some genotype")
        cands = np.flatnonzero(g_count == top)
        progressed = False
        for gc in cands[rng.permutation(len(cands))]:
            if to_remove == 0:
                break
            q = queues[gc]
            for pos, k in enumerate(q):
                if e_count[e_code[k]] > 1:
                    q.pop(pos)
                    removed[k] = True
                    g_count[gc] -= 1
                    e_count[e_code[k]] -= 1
                    to_remove -= 1
                    progressed = True
                    break
        if not progressed:
            raise DataError(f"fraction {fraction} would remove every record of some environment")
    keep[rec[removed]] = False
    return d.subset(keep)


# ---------------------------------------------------------------- artifacts


def write_kernel_fit(path, fit: KernelFit) -> Path:
    rows = [("model", fit.kind), ("mu", fit.mu)]
    rows += list(fit.variance_components.items())
    rows += [("reml_loglik", fit.reml_loglik), ("converged", int(fit.converged))]
    return write_csv(path, ["parameter", "value"], rows)


def write_predictions(path, genotype_ids, environment_ids, y_pred, y_true=None) -> Path:
    header = ["genotype_id", "environment_id", "y_pred"]
    if y_true is None:
        rows = zip(genotype_ids, environment_ids, y_pred)
    else:
        header.append("y_true")
        rows = zip(genotype_ids, environment_ids, y_pred, y_true)
    return write_csv(path, header, rows)


def save_kernel_fit(path, fit: KernelFit) -> Path:
    """Everything ``predict_many`` needs, as an npz with a JSON header."""
    header = {
        "kind": fit.kind,
        "mu": fit.mu,
        "variance_components": fit.variance_components,
        "genotype_ids": fit.genotype_ids,
        "environment_ids": fit.environment_ids,
        "reml_loglik": fit.reml_loglik,
        "converged": fit.converged,
    }
    arrays = {"genotype_effects": fit.genotype_effects}
    if fit.kind == "gxeblup":
        arrays.update(environment_effects=fit.environment_effects, ge_left=fit._ge_left, ge_right=fit._ge_right)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    return path


def load_kernel_fit(path) -> KernelFit:
    with np.load(path, allow_pickle=False) as z:
        h = json.loads(z["header"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "header"}
    return KernelFit(
        h["kind"],
        h["mu"],
        h["variance_components"],
        h["genotype_ids"],
        arrays["genotype_effects"],
        h["environment_ids"],
        arrays.get("environment_effects"),
        h["reml_loglik"],
        h["converged"],
        arrays.get("ge_left"),
        arrays.get("ge_right"),
    )

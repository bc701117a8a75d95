"""Synthetic multi-environment trials with known ground truth.

Genotype effects come from sparse causal markers; interaction effects are
GE_i. = F_i Lambda' + psi noise, where factor scores F are (partly) marker
driven and loadings Lambda are (partly) linear in environment features, so
both the mixed model and the feature-based predictors have signal to find.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gxe.data import (
    FIRST_DAY,
    N_DAYS,
    DataError,
    Dataset,
    EnvironmentTable,
    GenotypeTable,
    write_csv,
    write_dataset,
    write_trials,
)

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    n_g: int = 100
    n_e: int = 12
    d_g: int = 500
    d_e: int = 33
    r_true: int = 2
    sigma_g2: float = 1.0
    lambda_scale: float = 1.0
    psi_range: tuple[float, float] = (0.05, 0.2)
    resid_range: tuple[float, float] = (0.5, 1.0)
    replicates: int = 2
    missing_cell_fraction: float = 0.1
    n_causal_markers: int = 20
    n_causal_env_features: int = 5
    seed: int = 0
    mu: float = 10.0
    env_effect_sd: float = 1.5
    factor_marker_share: float = 0.8  # share of factor-score variance explained by markers
    loading_noise: float = 0.1  # share of loading variance not explained by env features
    loading_curvature: float = 0.0  # share of the feature-driven loading that is quadratic
    n_years: int = 8
    first_year: int = 2014
    n_g_test: int = 0  # new genotypes, observed only in the test year
    n_e_test: int = 0  # environments of the test year (first_year + n_years)
    n_founders: int = 0  # >0: lines are recombinant crosses of founders (related genotypes)
    n_sites: int = 0  # >0: environments are site-years, sharing site-level features
    site_share: float = 0.7  # share of feature variance fixed by the site

    def validate(self) -> None:
        if self.n_e < 2:
            raise DataError("simulation needs at least 2 environments")
        if self.n_g < 1 or self.d_g < 1 or self.d_e < 3 or self.replicates < 1:
            raise DataError("n_g, d_g, replicates must be >= 1 and d_e >= 3")
        if self.r_true > self.n_e:
            raise DataError("r_true must not exceed n_e")
        if self.n_causal_markers > self.d_g or self.n_causal_env_features > self.d_e:
            raise DataError("causal counts must not exceed feature counts")
        if self.n_founders == 1 or self.n_founders < 0 or self.n_sites < 0:
            raise DataError("n_founders must be 0 or >= 2 and n_sites >= 0")
        if not 0.0 <= self.site_share <= 1.0:
            raise DataError("site_share must be in [0, 1]")
        if not 0.0 <= self.loading_curvature <= 1.0:
            raise DataError("loading_curvature must be in [0, 1]")
        if not 0.0 <= self.missing_cell_fraction < 1.0:
            raise DataError("missing_cell_fraction must be in [0, 1)")
        lo_p, hi_p = self.psi_range
        lo_r, hi_r = self.resid_range
        if min(lo_p, lo_r, self.sigma_g2) < 0 or hi_p < lo_p or hi_r < lo_r:
            raise DataError("variance ranges must be non-negative and ordered")
        all_zero = self.sigma_g2 == 0 and self.lambda_scale == 0 and hi_p == 0 and hi_r == 0
        if all_zero and self.missing_cell_fraction > 0:
            raise DataError("degenerate configuration: all variances zero with missing cells")

    @property
    def test_year(self) -> int:
        return self.first_year + self.n_years


DESK_PROFILE = SimConfig()


@dataclass
class GroundTruth:
    mu: float
    G: np.ndarray
    E: np.ndarray
    GE: np.ndarray
    Lambda: np.ndarray
    Psi: np.ndarray
    resid_vars: np.ndarray
    marker_effects: np.ndarray
    env_effect_weights: np.ndarray
    factor_scores: np.ndarray
    genotype_ids: list[str] = field(default_factory=list)
    environment_ids: list[str] = field(default_factory=list)

    @property
    def sigma_e(self) -> np.ndarray:
        return self.Lambda @ self.Lambda.T + np.diag(self.Psi)

    def cell_values(self) -> np.ndarray:
        """Noise-free cell yields mu + G_i + E_j + GE_ij."""
        return self.mu + self.G[:, None] + self.E[None, :] + self.GE


def _split_env_features(d_e: int) -> tuple[int, int, int]:
    if d_e == 33:
        return 11, 20, 2
    n_w = min(11, d_e - 3)
    return n_w, d_e - 2 - n_w, 2


def _delete_cells(rng, n_rows: int, n_cols: int, frac: float) -> np.ndarray:
    """Boolean keep-mask with ~frac cells removed; no row or column emptied."""
    keep = np.ones((n_rows, n_cols), dtype=bool)
    n_del = int(round(frac * n_rows * n_cols))
    if n_del == 0:
        return keep
    for _ in range(1000):
        keep[:] = True
        flat = rng.choice(n_rows * n_cols, size=n_del, replace=False)
        keep.flat[flat] = False
        if keep.any(axis=0).all() and keep.any(axis=1).all():
            return keep
    raise DataError("cannot delete cells without emptying a genotype or environment")


def _founder_markers(rng, n: int, d_g: int, n_founders: int) -> np.ndarray:
    """Recombinant lines from pairs of inbred founders; loci where parents differ are
    heterozygous (0) with probability 0.1."""
    freq = rng.uniform(0.05, 0.95, size=d_g)
    founders = np.where(rng.random((n_founders, d_g)) < freq, 1, -1)
    out = np.empty((n, d_g), dtype=np.int8)
    for i in range(n):
        a, b = rng.choice(n_founders, size=2, replace=False)
        cuts = np.sort(rng.choice(np.arange(1, d_g), size=min(rng.poisson(d_g / 100.0), d_g - 1), replace=False))
        from_a = np.zeros(d_g, dtype=bool)
        start, take_a = 0, bool(rng.integers(2))
        for stop in list(cuts) + [d_g]:
            from_a[start:stop] = take_a
            start, take_a = stop, not take_a
        line = np.where(from_a, founders[a], founders[b])
        het = (founders[a] != founders[b]) & (rng.random(d_g) < 0.1)
        line[het] = 0
        out[i] = line
    return out


def simulate(cfg: SimConfig) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset and its ground truth; deterministic under ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ng, ne = cfg.n_g + cfg.n_g_test, cfg.n_e + cfg.n_e_test
    r = cfg.r_true

    if cfg.n_founders:
        markers = _founder_markers(rng, ng, cfg.d_g, cfg.n_founders)
    else:
        markers = rng.integers(-1, 2, size=(ng, cfg.d_g)).astype(np.int8)
    X = markers.astype(np.float64)

    marker_effects = np.zeros(cfg.d_g)
    if cfg.n_causal_markers > 0:
        causal = rng.choice(cfg.d_g, size=cfg.n_causal_markers, replace=False)
        marker_effects[causal] = rng.normal(size=cfg.n_causal_markers)
    G = X @ marker_effects
    G = G - G.mean()
    sd = G.std()
    G = G * (math.sqrt(cfg.sigma_g2) / sd) if sd > 0 else np.zeros(ng)
    marker_effects = marker_effects * (math.sqrt(cfg.sigma_g2) / sd) if sd > 0 else marker_effects * 0

    # factor scores: unit population variance, i.i.d. over genotypes
    F = rng.normal(size=(ng, r)) * math.sqrt(1.0 - cfg.factor_marker_share)
    if cfg.n_causal_markers > 0 and cfg.factor_marker_share > 0:
        for k in range(r):
            idx = rng.choice(cfg.d_g, size=cfg.n_causal_markers, replace=False)
            b = rng.normal(size=cfg.n_causal_markers)
            score = X[:, idx] @ b
            # uniform {-1, 0, 1} markers have variance 2/3; founder lines do not, so use the spread
            sd = score.std() if cfg.n_founders else math.sqrt(2.0 / 3.0 * (b @ b))
            F[:, k] += math.sqrt(cfg.factor_marker_share) * score / (sd if sd > 0 else 1.0)
    if cfg.n_founders and ng > r:
        # shared ancestry correlates the factor columns; whiten so GE rows keep covariance LL' + Psi
        F = F - F.mean(axis=0)
        F = F @ np.linalg.inv(np.linalg.cholesky(np.cov(F, rowvar=False).reshape(r, r))).T

    # environment features in standard units, then an affine raw scale
    Z = rng.normal(size=(ne, cfg.d_e))
    site = np.arange(ne) % cfg.n_sites if cfg.n_sites else np.arange(ne)
    if cfg.n_sites:
        S = rng.normal(size=(cfg.n_sites, cfg.d_e))
        Z = math.sqrt(cfg.site_share) * S[site] + math.sqrt(1.0 - cfg.site_share) * Z
    loc = rng.uniform(-5.0, 25.0, size=cfg.d_e)
    scale = rng.uniform(0.5, 5.0, size=cfg.d_e)
    env_raw = loc + scale * Z

    W = np.zeros((cfg.d_e, r))
    if cfg.n_causal_env_features > 0 and r > 0:
        for k in range(r):
            idx = rng.choice(cfg.d_e, size=cfg.n_causal_env_features, replace=False)
            w = rng.normal(size=cfg.n_causal_env_features)
            W[idx, k] = w / np.linalg.norm(w)
    share = 1.0 - cfg.loading_noise if cfg.n_causal_env_features > 0 else 0.0
    h = Z @ W
    if cfg.loading_curvature > 0:
        # unit-variance quadratic response, uncorrelated with the linear part
        a = cfg.loading_curvature
        h = math.sqrt(1.0 - a) * h + math.sqrt(a) * (h * h - 1.0) / math.sqrt(2.0)
    Lambda = cfg.lambda_scale * (math.sqrt(share) * h + math.sqrt(1.0 - share) * rng.normal(size=(ne, r)))

    psi = rng.uniform(*cfg.psi_range, size=ne)
    resid = rng.uniform(*cfg.resid_range, size=ne)
    GE = F @ Lambda.T + rng.normal(size=(ng, ne)) * np.sqrt(psi)[None, :]

    w_env = np.zeros(cfg.d_e)
    if cfg.n_causal_env_features > 0:
        idx = rng.choice(cfg.d_e, size=cfg.n_causal_env_features, replace=False)
        w_env[idx] = rng.normal(size=cfg.n_causal_env_features) * cfg.env_effect_sd / math.sqrt(cfg.n_causal_env_features)
    env_weights = w_env / scale  # in raw feature units
    E = env_raw @ env_weights
    mu = cfg.mu - float(loc @ env_weights)

    gids = [f"G{i + 1:05d}" for i in range(ng)]
    eids = [f"E{j + 1:04d}" for j in range(ne)]
    years = np.array([cfg.first_year + (j % cfg.n_years) for j in range(cfg.n_e)] + [cfg.test_year] * cfg.n_e_test)

    keep = np.zeros((ng, ne), dtype=bool)
    keep[: cfg.n_g, : cfg.n_e] = _delete_cells(rng, cfg.n_g, cfg.n_e, cfg.missing_cell_fraction)
    if cfg.n_e_test:
        keep[:, cfg.n_e :] = _delete_cells(rng, ng, cfg.n_e_test, cfg.missing_cell_fraction)

    truth_cells = mu + G[:, None] + E[None, :] + GE
    gi, ej = np.nonzero(keep)
    n_cells = gi.size
    reps = cfg.replicates
    noise = rng.normal(size=(n_cells, reps)) * np.sqrt(resid[ej])[:, None]
    y = truth_cells[gi, ej][:, None] + noise
    n_neg = int((y < 0).sum())
    if n_neg:
        log.warning("clipping %d negative simulated yields to 0", n_neg)
        y = np.maximum(y, 0.0)

    genotype_id = np.repeat(np.array(gids, dtype=object)[gi], reps)
    environment_id = np.repeat(np.array(eids, dtype=object)[ej], reps)
    year = np.repeat(years[ej], reps)
    replicate = np.tile(np.arange(1, reps + 1), n_cells)

    n_w, n_s, n_m = _split_env_features(cfg.d_e)
    season = env_raw[:, :n_w]
    t = np.arange(N_DAYS)
    phase = rng.uniform(0, 2 * math.pi, size=n_w)
    wiggle = np.sin(2 * math.pi * t[:, None] / N_DAYS + phase[None, :]) * scale[:n_w][None, :]
    jitter = rng.normal(size=(ne, N_DAYS, n_w)) * 0.1 * scale[:n_w]
    jitter -= jitter.mean(axis=1, keepdims=True)
    wiggle -= wiggle.mean(axis=0, keepdims=True)
    weather = season[:, None, :] + wiggle[None] + jitter
    n_loc = cfg.n_sites or ne
    coords = np.column_stack([rng.uniform(30.0, 47.0, n_loc), rng.uniform(-100.0, -75.0, n_loc)])[site]
    envs = EnvironmentTable(eids, weather, env_raw[:, n_w : n_w + n_s].copy(), env_raw[:, n_w + n_s :].copy(), coords)

    ds = Dataset(genotype_id, environment_id, year, replicate, y.ravel(), GenotypeTable(gids, markers), envs)
    truth = GroundTruth(mu, G, E, GE, Lambda, psi, resid, marker_effects, env_weights, F, gids, eids)
    return ds, truth


def write_truth(directory, truth: GroundTruth) -> list[Path]:
    directory = Path(directory)
    r = truth.Lambda.shape[1]
    return [
        write_csv(directory / "truth_scalars.csv", ["name", "value"], [("mu", truth.mu)]),
        write_csv(
            directory / "truth_genotypes.csv",
            ["genotype_id", "G"] + [f"factor_{k + 1}" for k in range(r)],
            ([g, truth.G[i], *truth.factor_scores[i]] for i, g in enumerate(truth.genotype_ids)),
        ),
        write_csv(
            directory / "truth_environments.csv",
            ["environment_id", "E", "psi", "resid_var"] + [f"lambda_{k + 1}" for k in range(r)],
            (
                [e, truth.E[j], truth.Psi[j], truth.resid_vars[j], *truth.Lambda[j]]
                for j, e in enumerate(truth.environment_ids)
            ),
        ),
        write_csv(
            directory / "truth_interactions.csv",
            ["genotype_id", "environment_id", "GE"],
            (
                (g, e, truth.GE[i, j])
                for i, g in enumerate(truth.genotype_ids)
                for j, e in enumerate(truth.environment_ids)
            ),
        ),
        write_csv(directory / "truth_marker_effects.csv", ["marker", "effect"],
                  ((f"m{k + 1}", v) for k, v in enumerate(truth.marker_effects))),
        write_csv(directory / "truth_env_weights.csv", ["feature", "weight"],
                  ((f"x{k + 1}", v) for k, v in enumerate(truth.env_effect_weights))),
    ]


def write_simulation(directory, d: Dataset, truth: GroundTruth, test_year: int | None = None) -> list[Path]:
    """Interchange CSVs (training trials, test trials if any) plus truth files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if test_year is None:
        test_year = int(d.year.max()) + 1
    is_test = d.year == test_year
    paths = write_dataset(directory, d.subset(~is_test))

    paths.append(write_trials(directory / "test_trials.csv", d.subset(is_test)))
    return paths + write_truth(directory, truth)


def config_dict(cfg: SimConfig) -> dict:
    return asdict(cfg)

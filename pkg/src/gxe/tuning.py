"""Random-search hyperparameter tuning of the network stages on one validation fold."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from gxe import neural
from gxe.data import DataError, Dataset, FoldSpec, write_csv
from gxe.mixed_model import LabelSets
from gxe.pipeline import derive_seed, with_env_vectors

log = logging.getLogger(__name__)

TARGETS = ("y_g", "y_e", "y_ge", "yield")
CRITERIA = ("mse", "mse_minus_5r")

_LR = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
_WD = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)

# per-target search spaces and default draw counts
TABLE_GRIDS: dict[str, dict[str, tuple]] = {
    "y_g": {"width": (64, 96, 128, 192, 256), "learning_rate": _LR, "weight_decay": _WD},
    "y_e": {
        "layers": (3, 4, 5),
        "width": (8, 16, 32, 48, 64),
        "learning_rate": (1e-5, 3e-5, 1e-4, 3e-4, 1e-3),
        "weight_decay": (1e-5, 5e-5, 1e-4, 3e-4, 1e-3),
    },
    "y_ge": {"embed_dim": (8, 16, 32, 64, 128), "learning_rate": _LR, "weight_decay": _WD},
    "yield": {"learning_rate": _LR, "weight_decay": _WD},
}
TABLE_BUDGETS = {"y_g": 125, "y_e": 200, "y_ge": 125, "yield": 25}


@dataclass(frozen=True)
class TuneSpec:
    target: str
    grid: Mapping[str, Sequence] = field(default_factory=dict)
    budget: int = 0  # 0: the default draw count for the target
    criterion: str = "mse"
    replicates_per_setting: int = 1

    def normalized(self) -> "TuneSpec":
        """Fill defaults; y_e targets always use mse_minus_5r over 5 replicates."""
        if self.target not in TARGETS:
            raise DataError(f"unknown tuning target {self.target!r}; choose from {list(TARGETS)}")
        if self.criterion not in CRITERIA:
            raise DataError(f"unknown criterion {self.criterion!r}; choose from {list(CRITERIA)}")
        grid = dict(self.grid) if self.grid else dict(TABLE_GRIDS[self.target])
        if not grid or any(len(v) == 0 for v in grid.values()):
            raise DataError("tuning grid is empty")
        budget = self.budget or TABLE_BUDGETS[self.target]
        if budget < 1 or self.replicates_per_setting < 1:
            raise DataError("budget and replicates_per_setting must be >= 1")
        crit, reps = self.criterion, self.replicates_per_setting
        if self.target == "y_e":
            crit, reps = "mse_minus_5r", 5
        if crit == "mse_minus_5r" and reps != 5:
            raise DataError("criterion mse_minus_5r needs 5 replicates per setting")
        return TuneSpec(self.target, grid, budget, crit, reps)


def sample_configurations(grid: Mapping[str, Sequence], budget: int, seed: int) -> list[dict]:
    """``budget`` distinct grid points drawn without replacement (all of them if fewer)."""
    keys = list(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    if not points:
        raise DataError("tuning grid is empty")
    rng = np.random.default_rng(seed)
    take = rng.choice(len(points), size=min(budget, len(points)), replace=False)
    return [dict(zip(keys, points[i])) for i in take]


@dataclass
class LeaderboardRow:
    setting: int
    config: dict
    score: float
    mse: float
    r: float


@dataclass
class TuneResult:
    spec: TuneSpec
    rows: list[LeaderboardRow]  # best first

    @property
    def best(self) -> dict:
        return self.rows[0].config


Objective = Callable[[dict, int], tuple[float, float]]  # (config, seed) -> (mse, pearson r)


def tune(spec: TuneSpec, objective: Objective, seed: int) -> TuneResult:
    """Evaluate sampled configurations and rank them by the criterion (lower is better)."""
    spec = spec.normalized()
    configs = sample_configurations(spec.grid, spec.budget, derive_seed(seed, "tune", spec.target))
    rows = []
    for i, cfg in enumerate(configs):
        mses, rs = [], []
        for k in range(spec.replicates_per_setting):
            # common random numbers: replicate k uses the same seed for every setting
            mse, r = objective(cfg, derive_seed(seed, "tune", spec.target, "replicate", k))
            mses.append(mse)
            rs.append(0.0 if math.isnan(r) else r)
        mses, rs = np.array(mses), np.array(rs)
        score = float(np.mean(mses - 5.0 * rs)) if spec.criterion == "mse_minus_5r" else float(mses.mean())
        if not math.isfinite(score):
            score = math.inf
        rows.append(LeaderboardRow(i, cfg, score, float(mses.mean()), float(rs.mean())))
        log.info("tune %s setting %d/%d %s -> %.6g", spec.target, i + 1, len(configs), cfg, score)
    rows.sort(key=lambda r: (r.score, r.setting))
    return TuneResult(spec, rows)


def write_leaderboard(path, result: TuneResult):
    keys = list(result.spec.grid)
    header = ["rank", "setting"] + keys + [result.spec.criterion, "mse", "pearson_r"]
    rows = (
        [rank, r.setting] + [r.config[k] for k in keys] + [r.score, r.mse, r.r]
        for rank, r in enumerate(result.rows, start=1)
    )
    return write_csv(path, header, rows)


# ---------------------------------------------------------------- objectives on a fold


def _mse_r(pred, y) -> tuple[float, float]:
    pred, y = np.asarray(pred, float), np.asarray(y, float)
    mse = float(np.mean((pred - y) ** 2))
    if len(y) < 2 or np.std(pred) == 0 or np.std(y) == 0:
        return mse, float("nan")
    return mse, float(np.corrcoef(pred, y)[0, 1])


@dataclass
class FoldData:
    """Inputs and labels of one tuning fold, split into fit and validation parts."""

    d: Dataset  # env vectors standardized on fit environments
    labels: LabelSets
    g_fit: list[str]
    g_val: list[str]
    e_fit: list[str]
    e_val: list[str]
    fit_cells: tuple[np.ndarray, np.ndarray]  # label-grid indices
    val_cells: tuple[np.ndarray, np.ndarray]
    val_yield: np.ndarray  # observed cell means of the validation cells


def fold_data(train: Dataset, labels: LabelSets, folds: FoldSpec, k: int) -> FoldData:
    year, geno = folds.folds[k]
    fit_mask = folds.train_mask(train, k)
    val_mask = folds.eval_mask(train, k, "y_ge")
    env_year = dict(zip(train.environment_id, train.year))
    e_fit = [e for e in labels.environment_ids if env_year.get(e) != year]
    e_val = [e for e in labels.environment_ids if env_year.get(e) == year]
    g_val = [g for g in labels.genotype_ids if g in geno]
    g_fit = [g for g in labels.genotype_ids if g not in geno]
    if not (e_fit and e_val and g_fit and g_val):
        raise DataError(f"tuning fold {k} leaves an empty fit or validation part")
    d = with_env_vectors(train, e_fit)
    gpos = {g: i for i, g in enumerate(labels.genotype_ids)}
    epos = {e: j for j, e in enumerate(labels.environment_ids)}

    def cells(mask):
        sub = train.subset(mask)
        gs, es, cnt, s1, _ = sub.cell_stats(sorted(set(sub.genotype_id)), sorted(set(sub.environment_id)))
        gi, ej = np.nonzero(cnt)
        idx = (np.array([gpos[gs[i]] for i in gi], dtype=np.intp), np.array([epos[es[j]] for j in ej], dtype=np.intp))
        return idx, s1[gi, ej] / cnt[gi, ej]

    fit_cells, _ = cells(fit_mask)
    val_cells, val_yield = cells(val_mask)
    if len(val_yield) == 0:
        raise DataError(f"tuning fold {k} has no validation cells")
    return FoldData(d, labels, g_fit, g_val, e_fit, e_val, fit_cells, val_cells, val_yield)


def _pretrained(fd: FoldData, cfgs: neural.StageConfigs, seed: int):
    cfgs = cfgs.with_seed(seed)
    a, lab = cfgs.arch, fd.labels
    gpos = {g: i for i, g in enumerate(lab.genotype_ids)}
    epos = {e: j for j, e in enumerate(lab.environment_ids)}
    Xg = neural.genotype_features(fd.d, fd.g_fit)
    Xe = neural.environment_features(fd.d, fd.e_fit)
    f_g = neural.build_genotype_encoder(Xg.shape[1], a.g_width, a.g_layers, a.dropout, seed=cfgs.g.seed)
    f_e = neural.build_env_encoder(Xe.shape[1], a.e_width, a.e_layers, a.dropout, seed=cfgs.e.seed)
    f_g, _ = neural.train_component(f_g, Xg, lab.y_g[[gpos[g] for g in fd.g_fit]], cfgs.g)
    f_e, _ = neural.train_component(f_e, Xe, lab.y_e[[epos[e] for e in fd.e_fit]], cfgs.e)
    return f_g, f_e


def make_objective(target: str, fd: FoldData, cfgs: neural.StageConfigs) -> Objective:
    """Objective for one target; stage settings not in the sampled config come from ``cfgs``."""
    lab = fd.labels
    gpos = {g: i for i, g in enumerate(lab.genotype_ids)}
    epos = {e: j for j, e in enumerate(lab.environment_ids)}
    a = cfgs.arch
    Xg_all = neural.genotype_features(fd.d, lab.genotype_ids)
    Xe_all = neural.environment_features(fd.d, lab.environment_ids)

    if target == "y_g":
        fit = [gpos[g] for g in fd.g_fit]
        val = [gpos[g] for g in fd.g_val]

        def objective(c, seed):
            m = neural.build_genotype_encoder(Xg_all.shape[1], int(c.get("width", a.g_width)), a.g_layers, a.dropout, seed)
            tc = replace(cfgs.g, seed=seed + 1, **_train_keys(c))
            m, _ = neural.train_component(m, Xg_all[fit], lab.y_g[fit], tc)
            return _mse_r(m(Xg_all[val]), lab.y_g[val])

        return objective

    if target == "y_e":
        fit = [epos[e] for e in fd.e_fit]
        val = [epos[e] for e in fd.e_val]

        def objective(c, seed):
            m = neural.build_env_encoder(
                Xe_all.shape[1], int(c.get("width", a.e_width)), int(c.get("layers", a.e_layers)), a.dropout, seed
            )
            tc = replace(cfgs.e, seed=seed + 1, **_train_keys(c))
            m, _ = neural.train_component(m, Xe_all[fit], lab.y_e[fit], tc)
            return _mse_r(m(Xe_all[val]), lab.y_e[val])

        return objective

    if target not in ("y_ge", "yield"):
        raise DataError(f"unknown tuning target {target!r}")
    cache: dict[int, tuple] = {}
    gi, ej = fd.fit_cells
    vi, vj = fd.val_cells
    y_fit = lab.y_ge[gi, ej]
    if np.isnan(y_fit).any():
        raise DataError("y_ge labels missing for fit cells")

    def objective(c, seed):
        # stage-1 encoders are shared by all settings of a replicate
        if seed not in cache:
            cache[seed] = _pretrained(fd, cfgs, seed)
        f_g, f_e = cache[seed]
        tt = neural.TwoTowerModel.from_encoders(f_g, f_e, int(c.get("embed_dim", a.embed_dim)), seed=seed + 2)
        tc = replace(cfgs.ge, seed=seed + 3, **_train_keys(c))
        tt, _ = neural.train_two_tower(tt, Xg_all[gi], Xe_all[ej], y_fit, tc)
        if target == "y_ge":
            return _mse_r(tt(Xg_all[vi], Xe_all[vj]), lab.y_ge[vi, vj])
        models = neural.Models(f_g, f_e, tt, lab.mu_hat)
        pred = neural.predict_yield(models, lab.mu_hat, Xg_all[vi], Xe_all[vj])
        return _mse_r(pred, fd.val_yield)

    return objective


def _train_keys(c: dict) -> dict:
    return {k: c[k] for k in ("learning_rate", "weight_decay", "batch_size", "epochs") if k in c}

"""``gxe <subcommand> --config FILE [--seed N] [--profile desk|full] [--out DIR]``.

Configuration files are INI documents (see README). Every key has a default;
unknown sections or keys are rejected. Each run writes the merged
configuration to ``<out>/config-<subcommand>.ini`` and a manifest with content
hashes of everything it read or wrote to ``<out>/manifest-<subcommand>.json``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from gxe import evaluation as ev
from gxe import kernels, neural, pipeline, tuning
from gxe.data import (
    DataError,
    Dataset,
    load_dataset,
    load_trials,
    make_cv_folds,
    prepare,
    write_csv,
    write_dataset,
)
from gxe.mixed_model import NumericalError, read_labels, write_blups, write_fa_fit, write_labels
from gxe.simgen import SimConfig, simulate, write_simulation

log = logging.getLogger("gxe")

SUBCOMMANDS = ("simulate", "ingest", "decompose", "train", "predict", "evaluate", "select", "tune", "experiment")
SCENARIOS = ("all", "nE", "nGE")


class ConfigError(DataError):
    pass


# ---------------------------------------------------------------- configuration schema

_SIM_DEFAULTS = {f.name: f.default for f in dataclasses.fields(SimConfig) if f.name != "seed"}

SCHEMA: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "profile": "desk", "out": "gxe-out", "workers": 1},
    "data": {
        "dir": "",  # dataset directory; empty means <out>/data
        "raw_dir": "",  # ingest input
        "test_year": 0,  # 0: the latest year
        "maf_min": 0.01,
        "max_missing": 0.10,
        "target_count": 20000,
    },
    "simulate": _SIM_DEFAULTS,
    "decompose": {"method": "fa", "r": 2, "tol": 1e-8, "max_iter": 500},
    "train": {
        "model": "mixinn",
        "g_width": None,
        "g_layers": None,
        "e_width": None,
        "e_layers": None,
        "dropout": None,
        "embed_dim": None,
        **{f"{s}_{k}": None for s in ("g", "e", "ge") for k in ("epochs", "batch_size", "learning_rate", "weight_decay")},
        "gxeblup_fraction": 1.0,
    },
    "predict": {"scenario": "all"},
    "evaluate": {"predictions": ""},
    "select": {"predictions": "", "fraction": 0.2, "fractions": (0.05, 0.1, 0.2, 0.3, 0.5, 1.0), "coverage_min": 0.9},
    "tune": {
        "target": "y_g",
        "budget": 0,
        "criterion": "mse",
        "replicates": 1,
        "n_folds": 8,
        "fold": -1,  # -1: the tuning-year fold
        "width": (),
        "layers": (),
        "embed_dim": (),
        "learning_rate": (),
        "weight_decay": (),
    },
    "experiment": {
        "models": pipeline.MODELS,
        "folds": 0,  # 0: one fit on all training years
        "replicates": 2,
        "fractions": (0.05, 0.1, 0.2, 0.3, 0.5, 1.0),
        "coverage_min": 0.9,
    },
}

# keys whose value is a list of numbers (the rest are scalars)
_INT_LISTS = {("tune", "width"), ("tune", "layers"), ("tune", "embed_dim")}
_TRAIN_INT = {"g_width", "g_layers", "e_width", "e_layers", "embed_dim", "g_epochs", "e_epochs", "ge_epochs",
              "g_batch_size", "e_batch_size", "ge_batch_size"}


def _parse(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        if section == "train" and default is None:
            return int(text) if key in _TRAIN_INT else float(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if (section, key) in _INT_LISTS:
                return tuple(int(p) for p in parts)
            if default and isinstance(default[0], str):
                return tuple(parts)
            return tuple(float(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def _format(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> dict[str, dict[str, Any]]:
    """Defaults merged with the file and then with command-line overrides (``[run]`` keys)."""
    cfg = {s: dict(keys) for s, keys in SCHEMA.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                if text.strip() == "" and SCHEMA[section][key] in (None, "", ()):
                    continue
                cfg[section][key] = _parse(section, key, text, SCHEMA[section][key])
    for key, v in (overrides or {}).items():
        if v is not None:
            cfg["run"][key] = v
    _validate(cfg)
    return cfg


def _validate(cfg) -> None:
    run = cfg["run"]
    if run["profile"] not in neural.PROFILES:
        raise ConfigError(f"profile must be one of {sorted(neural.PROFILES)}")
    if run["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if cfg["predict"]["scenario"] not in SCENARIOS:
        raise ConfigError(f"[predict] scenario must be one of {list(SCENARIOS)}")
    if cfg["train"]["model"] not in pipeline.MODELS:
        raise ConfigError(f"[train] model must be one of {list(pipeline.MODELS)}")
    if cfg["decompose"]["method"] not in ("fa", "anova"):
        raise ConfigError("[decompose] method must be fa or anova")
    unknown = set(cfg["experiment"]["models"]) - set(pipeline.MODELS)
    if unknown or not cfg["experiment"]["models"]:
        raise ConfigError(f"[experiment] models must be a non-empty subset of {list(pipeline.MODELS)}")
    if cfg["experiment"]["replicates"] < 1 or cfg["experiment"]["folds"] < 0:
        raise ConfigError("[experiment] replicates must be >= 1 and folds >= 0")
    sim = cfg["simulate"]
    for key in ("psi_range", "resid_range"):
        if len(sim[key]) != 2:
            raise ConfigError(f"[simulate] {key} needs two values")
    sim_config(cfg).validate()
    stage_configs(cfg)


def write_config(path, cfg) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, keys in cfg.items():
        cp[section] = {k: _format(v) for k, v in keys.items()}
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def sim_config(cfg) -> SimConfig:
    s = dict(cfg["simulate"])
    s["psi_range"] = tuple(float(x) for x in s["psi_range"])
    s["resid_range"] = tuple(float(x) for x in s["resid_range"])
    return SimConfig(seed=pipeline.derive_seed(cfg["run"]["seed"], "simulate"), **s)


def stage_configs(cfg) -> neural.StageConfigs:
    """Profile defaults with any [train] overrides; fills the overrides in place."""
    base = neural.PROFILES[cfg["run"]["profile"]]
    t = cfg["train"]
    arch_keys = ("g_width", "g_layers", "e_width", "e_layers", "dropout", "embed_dim")
    arch = replace(base.arch, **{k: t[k] for k in arch_keys if t[k] is not None})
    stages = {}
    for s in ("g", "e", "ge"):
        tc = getattr(base, s)
        kw = {k: t[f"{s}_{k}"] for k in ("epochs", "batch_size", "learning_rate", "weight_decay") if t[f"{s}_{k}"] is not None}
        stages[s] = replace(tc, **kw)
        try:
            stages[s].validate()
        except ValueError as exc:
            raise ConfigError(f"[train] {s} stage: {exc}") from None
    out = neural.StageConfigs(arch, stages["g"], stages["e"], stages["ge"])
    for k in arch_keys:
        t[k] = getattr(arch, k)
    for s in ("g", "e", "ge"):
        for k in ("epochs", "batch_size", "learning_rate", "weight_decay"):
            t[f"{s}_{k}"] = getattr(stages[s], k)
    return out


# ---------------------------------------------------------------- run context


@dataclass
class Run:
    subcommand: str
    cfg: dict
    out: Path
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.cfg["run"]["seed"])

    def read(self, path: Path, producer: str) -> Path:
        if not Path(path).exists():
            raise DataError(f"missing {path}; run `gxe {producer}` first")
        self.inputs.append(Path(path))
        return Path(path)

    def wrote(self, paths) -> None:
        self.outputs.extend(Path(p) for p in ([paths] if isinstance(paths, (str, Path)) else paths))

    def stage_dir(self, name: str) -> Path:
        p = self.out / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def write_manifest(self) -> Path:
        def entry(p: Path):
            return {"path": str(p), "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}

        doc = {
            "subcommand": self.subcommand,
            "seed": self.seed,
            "profile": self.cfg["run"]["profile"],
            "seeds": self.seeds,
            "inputs": [entry(p) for p in _unique(self.inputs)],
            "outputs": [entry(p) for p in _unique(self.outputs)],
        }
        path = self.out / f"manifest-{self.subcommand}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _unique(paths):
    seen, out = set(), []
    for p in paths:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def data_dir(run: Run) -> Path:
    d = run.cfg["data"]["dir"]
    return Path(d) if d else run.out / "data"


DATA_FILES = ("trials.csv", "markers.csv", "weather.csv", "soil.csv", "management.csv")


def load_data(run: Run) -> tuple[Dataset, int]:
    """Training and test records of the dataset directory, plus the test year."""
    root = data_dir(run)
    paths = [run.read(root / f, "simulate` or `gxe ingest") for f in DATA_FILES]
    d = load_dataset(*paths)
    test_path = root / "test_trials.csv"
    if test_path.exists():
        run.read(test_path, "simulate")
        cols = load_trials(test_path)
        d = Dataset(*(np.concatenate([a, b]) for a, b in zip((d.genotype_id, d.environment_id, d.year, d.replicate, d.y), cols)),
                    d.genotypes, d.environments)
    test_year = int(run.cfg["data"]["test_year"]) or int(d.year.max())
    ok = ~np.isnan(d.y)
    return (d if ok.all() else d.subset(ok)), test_year


def split(d: Dataset, test_year: int) -> tuple[Dataset, Dataset]:
    is_test = d.year == test_year
    if not is_test.any():
        raise DataError(f"no records in test year {test_year}")
    if is_test.all():
        raise DataError("every record is in the test year; nothing to train on")
    return d.subset(~is_test), d.subset(is_test)


def cell_seed(master: int, fold, replicate: int) -> int:
    return pipeline.derive_seed(master, "cell", fold, replicate)


def scenario_subset(p: ev.PredictionSet, known_genotypes: set, scenario: str) -> ev.PredictionSet:
    if scenario == "all":
        return p
    known = np.fromiter((g in known_genotypes for g in p.genotype_id), bool, count=len(p))
    return p.subset(known if scenario == "nE" else ~known)


def _settings(cfg) -> pipeline.RunSettings:
    dc = cfg["decompose"]
    return pipeline.RunSettings(stage_configs(cfg), dc["r"], dc["tol"], dc["max_iter"], cfg["train"]["gxeblup_fraction"])


# ---------------------------------------------------------------- subcommands


def cmd_simulate(run: Run) -> None:
    sc = sim_config(run.cfg)
    run.seeds["simulate"] = sc.seed
    d, truth = simulate(sc)
    out = data_dir(run)
    run.wrote(write_simulation(out, d, truth, sc.test_year if sc.n_e_test else None))


def cmd_ingest(run: Run) -> None:
    dc = run.cfg["data"]
    if not dc["raw_dir"]:
        raise ConfigError("[data] raw_dir is required for ingest")
    raw = Path(dc["raw_dir"])
    paths = [run.read(raw / f, "ingest") for f in DATA_FILES]
    d = load_dataset(*paths)
    seed = pipeline.derive_seed(run.seed, "ingest")
    run.seeds["ingest"] = seed
    d, report = prepare(d, maf_min=dc["maf_min"], max_missing=dc["max_missing"], target_count=dc["target_count"], seed=seed)
    out = data_dir(run)
    run.wrote(write_dataset(out, d))
    run.wrote(write_csv(out / "ingest_report.csv", ["item", "count"], sorted(report.items())))


def _training_set(run: Run) -> tuple[Dataset, Dataset]:
    d, test_year = load_data(run)
    return split(d, test_year)


def cmd_decompose(run: Run) -> None:
    train, _ = _training_set(run)
    dc = run.cfg["decompose"]
    out = run.stage_dir("decompose")
    if dc["method"] == "anova":
        labels = pipeline.anova_labels(train)
    else:
        seed = pipeline.derive_seed(cell_seed(run.seed, "all", 0), "mixinn")
        run.seeds["decompose"] = seed
        fit, labels = pipeline.decompose(train, dc["r"], dc["tol"], dc["max_iter"], seed=seed)
        run.wrote([write_fa_fit(out / "fa_fit.csv", fit), write_blups(out / "blups.csv", fit)])
    run.wrote(write_labels(out / "labels.csv", labels))


def cmd_train(run: Run) -> None:
    train, _ = _training_set(run)
    model = run.cfg["train"]["model"]
    seed = pipeline.derive_seed(cell_seed(run.seed, "all", 0), model)
    run.seeds["train"] = seed
    train = pipeline.with_env_vectors(train, train.environment_order())
    out = run.stage_dir("train")
    if model in ("gblup", "gxeblup"):
        fit = pipeline.fit_kernel_model(model, train, train, run.cfg["train"]["gxeblup_fraction"], seed=seed)
        run.wrote([kernels.save_kernel_fit(out / "model.npz", fit), kernels.write_kernel_fit(out / "variance_components.csv", fit)])
        return
    labels = read_labels(run.read(run.out / "decompose" / "labels.csv", "decompose"))
    want = "fa" if model == "mixinn" else "anova"
    if run.cfg["decompose"]["method"] != want:
        raise ConfigError(f"model {model} needs [decompose] method = {want}")
    models = pipeline.fit_neural(train, labels, stage_configs(run.cfg), seed=seed)
    run.wrote(neural.save_models(out / "model.npz", models))
    for name, trace in models.traces.items():
        run.wrote(neural.write_trace(out / f"trace_{name}.csv", trace))


def cmd_predict(run: Run) -> None:
    train, test = _training_set(run)
    model = run.cfg["train"]["model"]
    path = run.read(run.out / "train" / "model.npz", "train")
    cells = pipeline.cell_targets(test)
    if model in ("gblup", "gxeblup"):
        fit = kernels.load_kernel_fit(path)
        if fit.kind != model:
            raise ConfigError(f"trained model is {fit.kind}, config says {model}")
        y = fit.predict_many(cells.genotype_ids, cells.environment_ids if model == "gxeblup" else None)
    else:
        train = pipeline.with_env_vectors(train, train.environment_order())
        y = pipeline.neural_predict(neural.load_models(path), train, cells.genotype_ids, cells.environment_ids)
    p = scenario_subset(cells.prediction_set(y), set(train.genotype_id), run.cfg["predict"]["scenario"])
    run.wrote(ev.write_predictions(run.stage_dir("predict") / "predictions.csv", p))


def _predictions_path(run: Run, section: str) -> Path:
    given = run.cfg[section]["predictions"]
    return run.read(Path(given) if given else run.out / "predict" / "predictions.csv", "predict")


def cmd_evaluate(run: Run) -> None:
    p = ev.read_predictions(_predictions_path(run, "evaluate"))
    try:
        train, _ = _training_set(run)
        known = set(train.genotype_id)
        scenarios = SCENARIOS
    except DataError:
        known, scenarios = set(), ("all",)
    model = run.cfg["train"]["model"]
    rows, env_rows = [], []
    for sc in scenarios:
        sub = scenario_subset(p, known, sc)
        if len(sub) == 0:
            continue
        rows.append(ev.metric_row(model, "all", 0, sc, sub))
        for m in ev.evaluate(sub).per_environment:
            env_rows.append((sc, m.environment_id, m.n, m.r, m.rho))
    out = run.stage_dir("evaluate")
    run.wrote(ev.write_metrics(out / "metrics.csv", rows))
    run.wrote(write_csv(out / "env_metrics.csv", ["scenario", "environment_id", "n", "r", "rho"], env_rows))


def cmd_select(run: Run) -> None:
    s = run.cfg["select"]
    p = ev.read_predictions(_predictions_path(run, "select"))
    reports = [ev.select_global(p, s["fraction"], s["coverage_min"]), ev.select_per_environment(p, s["fraction"])]
    out = run.stage_dir("select")
    run.wrote(ev.write_selection(out / "selection.csv", reports))
    run.wrote(write_csv(out / "selected.csv", ["strategy", "genotype_id", "environment_id"],
                        ((r.strategy, *_sel(x)) for r in reports for x in r.selected)))
    run.wrote(ev.write_gain_curve(out / "gain_curve.csv", ev.gain_curve([p], list(s["fractions"]), s["coverage_min"])))


def _sel(x):
    return (x, "") if isinstance(x, str) else x


def cmd_tune(run: Run) -> None:
    t = run.cfg["tune"]
    train, _ = _training_set(run)
    grid = {k: t[k] for k in ("width", "layers", "embed_dim", "learning_rate", "weight_decay") if t[k]}
    spec = tuning.TuneSpec(t["target"], grid, t["budget"], t["criterion"], t["replicates"]).normalized()
    if t["target"] == "y_e" and (t["criterion"], t["replicates"]) != ("mse_minus_5r", 5):
        log.warning("y_e target: using criterion mse_minus_5r with 5 replicates")
    folds = make_cv_folds(train, pipeline.derive_seed(run.seed, "folds"), n_folds=t["n_folds"])
    k = folds.tuning_fold_index if t["fold"] < 0 else t["fold"]
    if not 0 <= k < len(folds):
        raise ConfigError(f"[tune] fold must be in [0, {len(folds) - 1}]")
    dc = run.cfg["decompose"]
    seed = pipeline.derive_seed(run.seed, "tune", "labels")
    run.seeds.update(tune_labels=seed, folds=pipeline.derive_seed(run.seed, "folds"))
    _, labels = pipeline.decompose(train, dc["r"], dc["tol"], dc["max_iter"], seed=seed)
    fd = tuning.fold_data(train, labels, folds, k)
    result = tuning.tune(spec, tuning.make_objective(spec.target, fd, stage_configs(run.cfg)), run.seed)
    out = run.stage_dir("tune")
    run.wrote(tuning.write_leaderboard(out / f"leaderboard_{spec.target}.csv", result))
    best = configparser.ConfigParser(interpolation=None)
    best["train"] = {_train_key(spec.target, k): _format(v) for k, v in result.best.items()}
    path = out / f"best_{spec.target}.ini"
    with open(path, "w", encoding="utf-8") as fh:
        best.write(fh)
    run.wrote(path)


def _train_key(target: str, key: str) -> str:
    stage = {"y_g": "g", "y_e": "e", "y_ge": "ge", "yield": "ge"}[target]
    if key in ("learning_rate", "weight_decay"):
        return f"{stage}_{key}"
    if key == "embed_dim":
        return key
    return f"{stage}_{key}"


# ---------------------------------------------------------------- experiment


@dataclass(frozen=True)
class ExperimentPlan:
    models: tuple[str, ...]
    folds: int
    replicates: int
    out: Path

    def cells(self) -> list[tuple[str, str, int]]:
        fold_ids = ["all"] if self.folds == 0 else [str(k) for k in range(self.folds)]
        return [(m, f, r) for m in self.models for f in fold_ids for r in range(self.replicates)]


def _experiment_cell(args) -> tuple[str, list]:
    """Fit one (model, fold, replicate) and write its predictions; returns the file name and metric rows."""
    model, fold, rep, train, cells, seed, settings, out = args
    y = pipeline.run_models([model], train, cells, seed, settings)[model]
    p = cells.prediction_set(y)
    path = out / f"{model}_fold-{fold}_rep-{rep}.csv"
    ev.write_predictions(path, p)
    known = set(train.genotype_id)
    rows = []
    for sc in SCENARIOS:
        sub = scenario_subset(p, known, sc)
        if len(sub):
            rows.append(ev.metric_row(model, fold, rep, sc, sub))
    return str(path), rows


def cmd_experiment(run: Run) -> None:
    x = run.cfg["experiment"]
    d, test_year = load_data(run)
    train_all, test = split(d, test_year)
    plan = ExperimentPlan(tuple(x["models"]), x["folds"], x["replicates"], run.stage_dir("experiment"))
    pred_dir = plan.out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for stale in pred_dir.glob("*_fold-*_rep-*.csv"):
        stale.unlink()
    cells = pipeline.cell_targets(test)
    settings = _settings(run.cfg)
    fold_train = {"all": train_all}
    if plan.folds:
        fs = make_cv_folds(train_all, pipeline.derive_seed(run.seed, "folds"), n_folds=plan.folds)
        run.seeds["folds"] = pipeline.derive_seed(run.seed, "folds")
        fold_train = {str(k): train_all.subset(fs.train_mask(train_all, k)) for k in range(len(fs))}
    jobs = []
    for model, fold, rep in plan.cells():
        seed = cell_seed(run.seed, fold, rep)
        run.seeds[f"{model}/fold-{fold}/rep-{rep}"] = pipeline.derive_seed(seed, model)
        jobs.append((model, fold, rep, fold_train[fold], cells, seed, settings, pred_dir))
    if run.cfg["run"]["workers"] > 1:
        with ProcessPoolExecutor(run.cfg["run"]["workers"]) as pool:
            results = list(pool.map(_experiment_cell, jobs))
    else:
        results = [_experiment_cell(j) for j in jobs]
    rows = []
    for path, r in results:
        run.wrote(Path(path))
        rows += r
    run.wrote(ev.write_metrics(plan.out / "metrics.csv", rows))

    # replicate-level comparison and gain curves on the new-genotype scenario
    per: dict[str, dict[str, list]] = {}
    for row in rows:
        model, scenario = row[0], row[3]
        for name, v in zip(ev.METRIC_COLUMNS[5:], row[5:]):
            per.setdefault(model, {}).setdefault(f"{scenario}_{name}", []).append(v)
    if len(plan.cells()) // len(plan.models) >= 2:
        run.wrote(ev.write_comparison(plan.out / "comparison.csv", ev.compare_models(per)))
    curve_rows = []
    for model in plan.models:
        reps = [ev.read_predictions(p) for p, _ in results if Path(p).name.startswith(f"{model}_fold-")]
        for row in ev.gain_curve(reps, list(x["fractions"]), x["coverage_min"]):
            curve_rows.append((model, *row))
    run.wrote(write_csv(plan.out / "gain_curve.csv", ["model", "strategy", "fraction", "gain", "ci95_low", "ci95_high"], curve_rows))


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "decompose": cmd_decompose,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "select": cmd_select,
    "tune": cmd_tune,
    "experiment": cmd_experiment,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gxe", description="Genotype-by-environment yield prediction pipeline.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    ap.add_argument("--profile", choices=sorted(neural.PROFILES), help="network size profile")
    ap.add_argument("--out", help="output directory (overrides [run] out)")
    return ap


def run(subcommand: str, config_path=None, *, seed=None, profile=None, out=None) -> Run:
    cfg = load_config(config_path, {"seed": seed, "profile": profile, "out": out})
    r = Run(subcommand, cfg, Path(cfg["run"]["out"]))
    r.out.mkdir(parents=True, exist_ok=True)
    if config_path is not None:
        r.inputs.append(Path(config_path))
    COMMANDS[subcommand](r)
    r.wrote(write_config(r.out / f"config-{subcommand}.ini", cfg))
    r.write_manifest()
    return r


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("GXE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args.subcommand, args.config, seed=args.seed, profile=args.profile, out=args.out)
    except DataError as exc:
        print(f"gxe {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, neural.TrainingError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"gxe {args.subcommand}: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

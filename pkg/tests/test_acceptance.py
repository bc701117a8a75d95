"""Acceptance criteria 1-10, each at its stated tolerance, printing one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from gxe import cli, neural
from gxe import evaluation as ev
from gxe import pipeline as pl
from gxe.data import EnvironmentTable, GenotypeTable, split_by_year, split_test_scenarios
from gxe.kernels import environmental_relationship, genomic_relationship
from gxe.mixed_model import FAFit, FAParams, fit_fa, generate_labels, restricted_log_likelihood, solve_mme
from gxe.simgen import SimConfig, simulate

from test_mixed_model import _free_mask, dense_blups, dense_reml, grid_dataset

# planted strong G x E: related lines, site-year environments and loadings
# partly quadratic in the environment features (frozen before evaluation)
STRONG_GXE = dict(lambda_scale=2.0, n_founders=8, n_sites=4, site_share=0.9, loading_curvature=0.3, n_g_test=100, n_e_test=8)


@pytest.fixture
def report(capsys):
    def _report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return _report


def test_criterion_1_reml_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    d = grid_dataset(rng.normal(10, 2, size=(6, 3)))
    lam = rng.normal(size=(3, 2)) * _free_mask(3, 2)
    p = FAParams(0.0, np.zeros(3), 0.6, lam, rng.uniform(0.1, 0.5, 3), rng.uniform(0.3, 1.0, 3))
    err = abs(restricted_log_likelihood(d, p) - dense_reml(d, p))
    dt = time.perf_counter() - t0
    report(1, err < 1e-6 and dt < 1.0, f"|REML - dense| = {err:.2e}, {dt:.3f} s")


def test_criterion_2_blup_oracle(report):
    t0 = time.perf_counter()
    cfg = SimConfig(seed=102, n_g=15, n_e=5, d_g=30, n_years=5)
    d, t = simulate(cfg)
    p = FAParams(0.0, np.zeros(5), cfg.sigma_g2, t.Lambda, t.Psi, t.resid_vars)
    G, GE, env_fixed, mu = solve_mme(d, p)
    Gd, GEd, beta = dense_blups(d, p)
    err = max(np.abs(G - Gd).max(), np.abs(GE - GEd).max(), np.abs(mu + env_fixed - beta).max())
    dt = time.perf_counter() - t0
    report(2, err < 1e-8 and dt < 1.0, f"max |MME - dense| = {err:.2e}, {dt:.3f} s")


def test_criterion_3_fa_recovery(report):
    t0 = time.perf_counter()
    frob, s2g = [], []
    for seed in range(20):
        cfg = SimConfig(seed=seed)
        d, t = simulate(cfg)
        fit = fit_fa(d, r=2, seed=seed)
        gi = [t.environment_ids.index(e) for e in fit.environment_ids]
        truth = t.sigma_e[np.ix_(gi, gi)]
        frob.append(np.linalg.norm(fit.params.sigma_e - truth) / np.linalg.norm(truth))
        s2g.append(abs(fit.params.sigma_g2 - cfg.sigma_g2) / cfg.sigma_g2)
    dt = time.perf_counter() - t0
    mf, ms = float(np.median(frob)), float(np.median(s2g))
    report(3, mf < 0.15 and ms < 0.15 and dt < 300,
           f"median Frobenius rel. error {mf:.3f}, median sigma_g2 rel. error {ms:.3f}, {dt:.0f} s")


def test_criterion_4_label_identities(report):
    rng = np.random.default_rng(104)
    d = grid_dataset(rng.normal(10, 2, size=(7, 4)))
    p = FAParams(0.0, np.zeros(4), 0.0, np.zeros((4, 2)), np.zeros(4), np.ones(4))

    def labels(cell):
        fit = FAFit(p, [f"G{i}" for i in range(7)], [f"E{j}" for j in range(4)], np.zeros(7), np.zeros((7, 4)), cell, 0.0, True, 0)
        return generate_labels(fit, d)

    cell = rng.normal(10, 2, size=(7, 4))
    lab = labels(cell)
    row_spread = np.ptp(lab.y_ge.mean(axis=1))
    col_spread = np.ptp(lab.y_ge.mean(axis=0))
    recon = np.abs(lab.mu_hat + lab.y_g[:, None] + lab.y_e[None, :] + lab.y_ge - cell).max()
    additive = labels(5 + rng.normal(size=7)[:, None] + rng.normal(size=4)[None, :])
    dev = np.abs(additive.y_ge - additive.y_ge.mean()).max()
    ok = row_spread < 1e-10 and col_spread < 1e-10 and dev < 1e-8 and recon < 1e-12
    report(4, ok, f"row/col mean spread {row_spread:.1e}/{col_spread:.1e}, additive dev {dev:.1e}, reconstruction {recon:.1e}")


def test_criterion_5_gradient_checks(report):
    t0 = time.perf_counter()
    f_g = neural.build_genotype_encoder(40, 32, 2, seed=1)
    f_e = neural.build_env_encoder(33, 12, 3, seed=2)
    tt = neural.TwoTowerModel.from_encoders(f_g, f_e, seed=3)
    worst = {}
    for name, m in (("f_g", f_g), ("f_e", f_e), ("f_ge", tt)):
        worst[name] = max(neural.gradient_check(m, s) for s in neural.draw_check_points(m, 10, seed=4))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 30
    report(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f} s")


def test_criterion_6_relationship_identities(report):
    rng = np.random.default_rng(106)
    X = rng.integers(-1, 2, size=(9, 50))
    X[6] = X[2]
    Kg = genomic_relationship(GenotypeTable([f"G{i}" for i in range(9)], X)).K
    V = rng.normal(size=(7, 33))
    V[5] = V[1]
    env = EnvironmentTable([f"E{j}" for j in range(7)], np.zeros((7, 140, 1)), np.zeros((7, 1)), np.zeros((7, 1)), np.zeros((7, 2)), V)
    Ke = environmental_relationship(env).K
    tr = max(abs(np.trace(Kg) - 9), abs(np.trace(Ke) - 7))
    dup = (np.array_equal(Kg[6], Kg[2]) and np.array_equal(Kg[:, 6], Kg[:, 2])
           and np.array_equal(Ke[5], Ke[1]) and np.array_equal(Ke[:, 5], Ke[:, 1]))
    report(6, tr < 1e-9 and dup, f"trace error {tr:.1e}, duplicated rows exact: {dup}")


def _brute_ranks(x):
    return [1 + sum(v < u for v in x) + (sum(v == u for v in x) - 1) / 2 for u in x]


def _brute_pearson(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    return num / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))


def test_criterion_7_metric_oracles(report):
    rng = np.random.default_rng(107)
    worst, shift_err = 0.0, 0.0
    for _ in range(20):
        n_g, n_e = rng.integers(3, 8), rng.integers(1, 5)
        g = [f"G{i}" for i in range(n_g) for _ in range(n_e)]
        e = [f"E{j}" for _ in range(n_g) for j in range(n_e)]
        t = list(np.round(rng.normal(10, 2, len(g)), 1))
        p = list(np.round(rng.normal(10, 2, len(g)), 1))
        ps = ev.PredictionSet(g, e, p, t)
        rmse, mae, _ = ev.regression_metrics(ps)
        r_j, rho_j, *_ = ev.ranking_metrics(ps)
        b_rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / len(t))
        b_mae = sum(abs(a - b) for a, b in zip(p, t)) / len(t)
        rs, rhos = [], []
        for j in range(n_e):
            idx = [k for k in range(len(e)) if e[k] == f"E{j}"]
            pj, tj = [p[k] for k in idx], [t[k] for k in idx]
            rs.append(_brute_pearson(pj, tj))
            rhos.append(_brute_pearson(_brute_ranks(pj), _brute_ranks(tj)))
        worst = max(worst, abs(rmse - b_rmse), abs(mae - b_mae), abs(r_j - sum(rs) / n_e), abs(rho_j - sum(rhos) / n_e))
        offsets = rng.normal(0, 100, n_e)
        shifted = ev.PredictionSet(g, e, [v + offsets[int(x[1:])] for v, x in zip(p, e)], t)
        r2, rho2, *_ = ev.ranking_metrics(shifted)
        shift_err = max(shift_err, abs(r2 - r_j), abs(rho2 - rho_j))
    report(7, worst < 1e-12 and shift_err < 1e-12, f"max oracle deviation {worst:.1e}, shift deviation {shift_err:.1e}")


def _new_cells(cfg):
    d, _ = simulate(cfg)
    train, test = split_by_year(d, cfg.test_year)
    sc = split_test_scenarios(train, test)
    return train, pl.cell_targets(test.subset(sc.nGE)), pl.cell_targets(test)


def test_criterion_8_model_ordering(report):
    t0 = time.perf_counter()
    rho: dict[str, list[float]] = {}
    for seed in range(5):
        train, cells, _ = _new_cells(SimConfig(seed=seed, **STRONG_GXE))
        preds = pl.run_models(["mixinn", "gblup", "gxeblup"], train, cells, seed)
        for name, y in preds.items():
            rho.setdefault(name, []).append(ev.ranking_metrics(cells.prediction_set(y))[1])
    dt = time.perf_counter() - t0
    m = {k: float(np.mean(v)) for k, v in rho.items()}
    legs = {
        "MixINN >= GxEBLUP": m["mixinn"] >= m["gxeblup"],
        "GxEBLUP >= GBLUP": m["gxeblup"] >= m["gblup"],
        "MixINN >= additive": m["mixinn"] >= m["mixinn_additive"],
    }
    detail = ", ".join(f"{k} {v:.3f}" for k, v in sorted(m.items()))
    detail += "; " + ", ".join(f"{k}: {'yes' if v else 'no'}" for k, v in legs.items()) + f"; {dt:.0f} s"
    report(8, all(legs.values()) and dt < 1200, detail)


def test_criterion_9_selection_properties(report):
    t0 = time.perf_counter()
    gains = {k: [] for k in ("oracle", "model", "random", "oracle_env", "model_env", "random_env")}
    full_env = 0.0
    for seed in range(10):
        cfg = SimConfig(seed=seed, n_g_test=40, n_e_test=5)
        train, _, cells = _new_cells(cfg)
        y = pl.run_models(["mixinn"], train, cells, seed)["mixinn"]
        p = cells.prediction_set(y)
        rand = p.with_predictions(np.random.default_rng(seed).normal(size=len(p)))
        oracle = p.with_predictions(p.y_true)
        for name, q in (("oracle", oracle), ("model", p), ("random", rand)):
            gains[name].append(ev.select_global(q, 0.2).gain)
            gains[name + "_env"].append(ev.select_per_environment(q, 0.2).gain)
        full_env = max(full_env, abs(ev.select_per_environment(p, 1.0).gain))
    dt = time.perf_counter() - t0
    g = {k: float(np.mean(v)) for k, v in gains.items()}
    ok = (g["oracle"] >= g["model"] >= g["random"] and g["oracle_env"] >= g["model_env"] >= g["random_env"]
          and full_env == 0.0 and g["oracle_env"] >= g["oracle"] and dt < 300)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in g.items()) + f"; gain at 1.0: {full_env}; {dt:.0f} s"
    report(9, ok, detail)


def test_criterion_10_end_to_end_determinism(report, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[run]\nseed = 11\n\n[simulate]\nn_g = 30\nn_e = 6\nd_g = 60\nn_years = 6\nn_g_test = 10\nn_e_test = 3\n\n"
        "[train]\ng_epochs = 10\ne_epochs = 10\nge_epochs = 10\n\n"
        "[experiment]\nmodels = mixinn, sinn_style, gblup, gxeblup\nfolds = 2\nreplicates = 2\n",
        encoding="utf-8",
    )
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["experiment", "--config", str(cfg), "--out", str(out)]) == 0
        outputs.append({p.name: p.read_bytes() for p in (out / "experiment").glob("*.csv")})
    same = outputs[0] == outputs[1] and "metrics.csv" in outputs[0]
    report(10, same, f"{len(outputs[0])} metric CSVs byte-identical: {same}")

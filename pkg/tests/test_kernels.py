import numpy as np
import pytest

from gxe import pipeline as pl
from gxe.data import DataError, Dataset, GenotypeTable, split_by_year, split_test_scenarios
from gxe.evaluation import ranking_metrics
from gxe.kernels import (
    BudgetError,
    RelationshipMatrix,
    environmental_relationship,
    fit_gblup,
    fit_gxeblup,
    genomic_relationship,
    load_kernel_fit,
    save_kernel_fit,
    subsample_for_budget,
)
from gxe.simgen import SimConfig, simulate

from conftest import env_table, genotype_table


def make_dataset(g, e, y, n_g, n_e, rep=None) -> Dataset:
    g = np.array([f"G{i}" for i in g], dtype=object)
    e = np.array([f"E{j}" for j in e], dtype=object)
    rep = np.ones(len(g), int) if rep is None else np.asarray(rep)
    return Dataset(g, e, np.full(len(g), 2020), rep, np.asarray(y, float), genotype_table(n_g, 3), env_table(n_e))


def random_kernel(ids, seed, rank=None):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(len(ids), rank or len(ids)))
    K = A @ A.T / (rank or len(ids)) + 0.1 * np.eye(len(ids))
    return RelationshipMatrix(ids, K)


# ---------------------------------------------------------------- relationships


def test_genomic_trace_and_duplicates():
    X = np.random.default_rng(0).integers(-1, 2, size=(6, 40))
    X[4] = X[1]
    K = genomic_relationship(GenotypeTable([f"G{i}" for i in range(6)], X)).K
    assert np.trace(K) == pytest.approx(6, abs=1e-9)
    np.testing.assert_array_equal(K[4], K[1])
    np.testing.assert_array_equal(K[:, 4], K[:, 1])


def test_genomic_hand_example():
    X = np.array([[1, 0], [0, 1], [1, 1]])
    K = genomic_relationship(GenotypeTable(["a", "b", "c"], X), center=False).K
    # X X' = [[1,0,1],[0,1,1],[1,1,2]], trace 4, scaled by 3/4
    expected = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 2]]) * 0.75
    np.testing.assert_allclose(K, expected, atol=1e-12)


def test_genomic_centered_hand_example():
    X = np.array([[1, 0], [0, 1], [1, 1]])
    K = genomic_relationship(GenotypeTable(["a", "b", "c"], X)).K
    Xc = X - X.mean(axis=0)  # rows (1/3,-2/3), (-2/3,1/3), (1/3,1/3)
    M = np.array([[5, -4, -1], [-4, 5, -1], [-1, -1, 2]]) / 9.0
    np.testing.assert_allclose(Xc @ Xc.T, M, atol=1e-12)
    np.testing.assert_allclose(K, M / (4 / 3 / 3), atol=1e-12)


def test_environment_hand_example_and_errors():
    e = env_table(2)
    e.env_vector = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(environmental_relationship(e, center=False).K, np.eye(2), atol=1e-12)
    e.env_vector = np.zeros((2, 2))
    with pytest.raises(DataError):
        environmental_relationship(e)
    e.env_vector = None
    with pytest.raises(DataError):
        environmental_relationship(e)
    with pytest.raises(DataError):
        genomic_relationship(GenotypeTable(["a", "b"], np.zeros((2, 3))))


def test_relationship_is_permutation_equivariant():
    X = np.random.default_rng(1).integers(-1, 2, size=(7, 30))
    perm = np.random.default_rng(2).permutation(7)
    ids = [f"G{i}" for i in range(7)]
    K = genomic_relationship(GenotypeTable(ids, X)).K
    Kp = genomic_relationship(GenotypeTable([ids[i] for i in perm], X[perm])).K
    np.testing.assert_allclose(Kp, K[np.ix_(perm, perm)], atol=1e-12)


# ---------------------------------------------------------------- GBLUP


def test_gblup_identity_kernel_is_ridge():
    rng = np.random.default_rng(3)
    n_g, m = 6, 4
    g = np.repeat(np.arange(n_g), m)
    d = make_dataset(g, np.tile(np.arange(m), n_g), rng.normal(size=n_g * m) + g, n_g, m)
    Kg = RelationshipMatrix([f"G{i}" for i in range(n_g)], np.eye(n_g))
    s2g, s2e = 0.8, 1.3
    fit = fit_gblup(d, Kg, variances=(s2g, s2e))
    means = d.y.reshape(n_g, m).mean(axis=1)
    shrink = s2g / (s2g + s2e / m)
    np.testing.assert_allclose(fit.genotype_effects, shrink * (means - means.mean()), atol=1e-10)


def test_gblup_matches_dense_oracle():
    rng = np.random.default_rng(4)
    ids = [f"G{i}" for i in range(20)]
    X = rng.integers(-1, 2, size=(20, 3))
    Kg = genomic_relationship(GenotypeTable(ids, X))
    Kg = RelationshipMatrix(ids, Kg.K + 0.05 * np.eye(20))  # 3 markers give a rank-3 kernel
    train = np.arange(16)
    g = np.concatenate([train, train[:10]])
    d = make_dataset(g, np.zeros(len(g), int), rng.normal(size=len(g)) + X[g, 0], 20, 1)
    s2g, s2e = 0.6, 0.9
    fit = fit_gblup(d, Kg, variances=(s2g, s2e))

    Z = np.zeros((len(g), 20))
    Z[np.arange(len(g)), g] = 1
    V = s2g * Z @ Kg.K @ Z.T + s2e * np.eye(len(g))
    Vi = np.linalg.inv(V)
    one = np.ones(len(g))
    mu = one @ Vi @ d.y / (one @ Vi @ one)
    u = s2g * Kg.K @ Z.T @ Vi @ (d.y - mu)
    np.testing.assert_allclose(fit.predict_many(ids), mu + u, atol=1e-8)


def test_gblup_duplicates_and_unknown_genotype():
    X = np.random.default_rng(5).integers(-1, 2, size=(8, 20))
    X[7] = X[2]
    ids = [f"G{i}" for i in range(8)]
    Kg = genomic_relationship(GenotypeTable(ids, X))
    g = np.arange(6).repeat(2)
    d = make_dataset(g, np.tile([0, 1], 6), np.random.default_rng(6).normal(size=12), 8, 2)
    fit = fit_gblup(d, Kg)
    assert fit.predict("G7") == pytest.approx(fit.predict("G2"), abs=1e-12)
    with pytest.raises(DataError):
        fit.predict("G99")


def test_gblup_reml_is_a_local_maximum():
    d, _ = simulate(SimConfig(seed=7, n_g=40, n_e=4, d_g=60, n_years=4))
    Kg = genomic_relationship(d.genotypes)
    fit = fit_gblup(d, Kg)
    vc = fit.variance_components
    base = fit.reml_loglik
    for f in (0.99, 1.01):
        for k in ("sigma_g2", "sigma_eps2"):
            v = dict(vc)
            v[k] *= f
            other = fit_gblup(d, Kg, variances=(v["sigma_g2"], v["sigma_eps2"]))
            assert other.reml_loglik <= base + 1e-9


# ---------------------------------------------------------------- G x E BLUP


@pytest.fixture(scope="module")
def gxe_desk():
    rng = np.random.default_rng(8)
    n_g, n_e = 15, 5
    Kg = random_kernel([f"G{i}" for i in range(n_g)], 9, rank=4)
    Ke = random_kernel([f"E{j}" for j in range(n_e)], 10, rank=2)
    gi, ej = np.meshgrid(np.arange(12), np.arange(4), indexing="ij")
    keep = rng.random(gi.size) < 0.8
    g, e = gi.ravel()[keep], ej.ravel()[keep]
    g, e = np.concatenate([g, g[:10]]), np.concatenate([e, e[:10]])
    d = make_dataset(g, e, rng.normal(size=len(g)) + 0.5 * g - e, n_g, n_e)
    return d, Kg, Ke, g, e


def dense_gxe_predict(d, Kg, Ke, g, e, variances):
    s2g, s2e, s2ge, s2eps = variances
    n_g, n_e = len(Kg.ids), len(Ke.ids)
    Kge = np.kron(Kg.K, Ke.K)  # explicit Kronecker on the desk instance
    Zg = np.zeros((len(g), n_g))
    Zg[np.arange(len(g)), g] = 1
    Ze = np.zeros((len(g), n_e))
    Ze[np.arange(len(g)), e] = 1
    Zge = np.zeros((len(g), n_g * n_e))
    Zge[np.arange(len(g)), g * n_e + e] = 1
    V = s2g * Zg @ Kg.K @ Zg.T + s2e * Ze @ Ke.K @ Ze.T + s2ge * Zge @ Kge @ Zge.T + s2eps * np.eye(len(g))
    Vi = np.linalg.inv(V)
    one = np.ones(len(g))
    mu = one @ Vi @ d.y / (one @ Vi @ one)
    r = Vi @ (d.y - mu)
    gg, ee = np.meshgrid(np.arange(n_g), np.arange(n_e), indexing="ij")
    gg, ee = gg.ravel(), ee.ravel()
    C = s2g * Kg.K[gg][:, g] + s2e * Ke.K[ee][:, e] + s2ge * Kge[gg * n_e + ee][:, g * n_e + e]
    return gg, ee, mu + C @ r


def test_gxeblup_matches_dense_kronecker_oracle(gxe_desk):
    d, Kg, Ke, g, e = gxe_desk
    v = (0.7, 0.4, 0.5, 0.8)
    fit = fit_gxeblup(d, Kg, Ke, variances=v)
    gg, ee, expected = dense_gxe_predict(d, Kg, Ke, g, e, v)
    got = fit.predict_many([f"G{i}" for i in gg], [f"E{j}" for j in ee])
    np.testing.assert_allclose(got, expected, atol=1e-8)


def test_gxeblup_without_interaction_is_additive(gxe_desk):
    d, Kg, Ke, g, e = gxe_desk
    v = (0.7, 0.4, 0.0, 0.8)
    fit = fit_gxeblup(d, Kg, Ke, variances=v)
    gg, ee, expected = dense_gxe_predict(d, Kg, Ke, g, e, v)
    got = fit.predict_many([f"G{i}" for i in gg], [f"E{j}" for j in ee])
    np.testing.assert_allclose(got, expected, atol=1e-8)
    surface = got.reshape(15, 5)
    inter = surface - surface.mean(axis=1, keepdims=True) - surface.mean(axis=0) + surface.mean()
    assert np.abs(inter).max() < 1e-10


def test_gxeblup_is_linear_in_yields(gxe_desk):
    d, Kg, Ke, *_ = gxe_desk
    v = (0.7, 0.4, 0.5, 0.8)
    fit = fit_gxeblup(d, Kg, Ke, variances=v)
    d2 = Dataset(d.genotype_id, d.environment_id, d.year, d.replicate, 2 * d.y, d.genotypes, d.environments)
    fit2 = fit_gxeblup(d2, Kg, Ke, variances=tuple(4 * x for x in v))
    ids = ([f"G{i}" for i in range(15)], ["E4"] * 15)
    np.testing.assert_allclose(fit2.predict_many(*ids) - fit2.mu, 2 * (fit.predict_many(*ids) - fit.mu), atol=1e-9)


def test_gxeblup_round_trip_and_budget(gxe_desk, tmp_path):
    d, Kg, Ke, *_ = gxe_desk
    fit = fit_gxeblup(d, Kg, Ke)
    assert fit.converged
    back = load_kernel_fit(save_kernel_fit(tmp_path / "k.npz", fit))
    ids = ([f"G{i}" for i in range(15)], [f"E{j % 5}" for j in range(15)])
    np.testing.assert_array_equal(back.predict_many(*ids), fit.predict_many(*ids))
    with pytest.raises(BudgetError, match="subsample"):
        fit_gxeblup(d, Kg, Ke, memory_budget=1000)
    with pytest.raises(DataError):
        fit.predict_many(["G0"])


def test_gxeblup_ranks_better_than_gblup_under_strong_interaction():
    gblup, gxe = [], []
    for seed in range(5):
        cfg = SimConfig(seed=200 + seed, lambda_scale=2.0, n_g_test=60, n_e_test=6)
        d, _ = simulate(cfg)
        train, test = split_by_year(d, cfg.test_year)
        sc = split_test_scenarios(train, test)
        cells = pl.cell_targets(test.subset(sc.nGE))
        preds = pl.run_models(["gblup", "gxeblup"], train, cells, seed)
        gblup.append(ranking_metrics(cells.prediction_set(preds["gblup"]))[1])
        gxe.append(ranking_metrics(cells.prediction_set(preds["gxeblup"]))[1])
    assert np.mean(gxe) > np.mean(gblup)


# ---------------------------------------------------------------- subsampling


def replicated_dataset(seed=11):
    rng = np.random.default_rng(seed)
    n_g, n_e = 10, 4
    g, e, rep = np.meshgrid(np.arange(n_g), np.arange(n_e), [1, 2], indexing="ij")
    g, e, rep = g.ravel(), e.ravel(), rep.ravel()
    # genotype 0..2 are heavily observed, the rest sparsely
    keep = (g < 3) | (rng.random(g.size) < 0.35)
    keep |= (rep == 1) & (e == g % n_e)
    return make_dataset(g[keep], e[keep], rng.normal(size=keep.sum()), n_g, n_e, rep[keep])


def test_subsample_full_fraction_is_identity():
    d = replicated_dataset()
    assert subsample_for_budget(d, 1.0, seed=0) is d


def test_subsample_collapses_replicates_then_targets_frequent_genotypes():
    d = replicated_dataset()
    out = subsample_for_budget(d, 0.4, seed=3)
    assert out.n_s == round(0.4 * d.n_s)
    cells = list(zip(out.genotype_id, out.environment_id))
    assert len(cells) == len(set(cells))
    assert set(out.genotype_id) == set(d.genotype_id)
    assert set(out.environment_id) == set(d.environment_id)
    # removals came from the most frequently observed genotypes
    before = {g: n for g, n in zip(*np.unique(d.genotype_id, return_counts=True))}
    after = {g: n for g, n in zip(*np.unique(out.genotype_id, return_counts=True))}
    heavy = [f"G{i}" for i in range(3)]
    light = [g for g in before if g not in heavy]
    assert max(after[g] for g in heavy) <= max(min(before[g], 4) for g in light) + 1


def test_subsample_keeps_smallest_replicate_and_is_deterministic():
    d = replicated_dataset()
    n_cells = len(set(zip(d.genotype_id, d.environment_id)))
    out = subsample_for_budget(d, n_cells / d.n_s, seed=1)
    assert out.n_s == n_cells
    smallest = {}
    for g, e, r in zip(d.genotype_id, d.environment_id, d.replicate):
        smallest[g, e] = min(r, smallest.get((g, e), r))
    assert all(r == smallest[g, e] for g, e, r in zip(out.genotype_id, out.environment_id, out.replicate))
    a = subsample_for_budget(d, 0.5, seed=4)
    b = subsample_for_budget(d, 0.5, seed=4)
    np.testing.assert_array_equal(a.y, b.y)


def test_subsample_rejects_vanishing_groups():
    d = replicated_dataset()
    with pytest.raises(DataError):
        subsample_for_budget(d, 0.01, seed=0)
    with pytest.raises(DataError):
        subsample_for_budget(d, 0.0, seed=0)

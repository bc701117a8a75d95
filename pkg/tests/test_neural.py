from dataclasses import replace

import numpy as np
import pytest

from gxe import neural as nn
from gxe import pipeline as pl
from gxe.data import DataError, split_by_year, split_test_scenarios
from gxe.evaluation import ranking_metrics
from gxe.mixed_model import LabelSets
from gxe.simgen import SimConfig, simulate


def small_models(seed=0, d_g=12, d_e=6, dropout=0.5):
    f_g = nn.build_genotype_encoder(d_g, 16, 2, dropout, seed=seed)
    f_e = nn.build_env_encoder(d_e, 8, 3, dropout, seed=seed + 1)
    tt = nn.TwoTowerModel.from_encoders(f_g, f_e, seed=seed + 2)
    return f_g, f_e, tt


# ---------------------------------------------------------------- architecture


def test_default_widths():
    f_g = nn.build_genotype_encoder(500)
    f_e = nn.build_env_encoder(33)
    assert f_g.spec.hidden == ((256, "relu"), (128, "sigmoid"))
    assert f_e.spec.hidden == ((48, "relu"), (48, "relu"), (24, "sigmoid"))
    assert f_g.spec.out_dim == 1 and f_g.spec.layer_norm and f_g.spec.dropout == 0.5


def test_desk_profile_scales_widths_and_epochs():
    p, d = nn.FULL, nn.DESK
    assert d.arch.g_width * 4 == p.arch.g_width and d.arch.e_width * 4 == p.arch.e_width
    for stage in ("g", "e", "ge"):
        a, b = getattr(p, stage), getattr(d, stage)
        assert b.epochs * 2 == a.epochs
        assert (a.learning_rate, a.weight_decay, a.batch_size) == (b.learning_rate, b.weight_decay, b.batch_size)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        nn.MLPSpec(4, ((8, "relu"),), dropout=1.0).validate()
    with pytest.raises(ValueError):
        nn.MLPSpec(4, ((0, "relu"),)).validate()
    with pytest.raises(ValueError):
        nn.MLPSpec(4, ((8, "tanh"),)).validate()


def test_inference_is_deterministic_and_batch_invariant():
    f_g, _, tt = small_models()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(32, 12))
    Xe = rng.normal(size=(32, 6))
    a = f_g(X)
    assert a.shape == (32,)
    np.testing.assert_array_equal(a, f_g(X))
    single = np.array([f_g(X[i : i + 1])[0] for i in range(32)])
    np.testing.assert_allclose(single, a, rtol=0, atol=1e-12)
    perm = rng.permutation(32)
    np.testing.assert_allclose(tt(X[perm], Xe[perm]), tt(X, Xe)[perm], rtol=0, atol=1e-12)


def test_zero_weights_give_the_output_bias():
    f_g, *_ = small_models()
    for k in f_g.params:
        if k.startswith(("W", "b")):
            f_g.params[k][...] = 0.0
    f_g.params["b_out"][0] = 1.25
    out = f_g(np.random.default_rng(1).normal(size=(5, 12)))
    np.testing.assert_array_equal(out, np.full(5, 1.25))


def test_constant_input_column_acts_through_the_bias():
    _, f_e, _ = small_models()
    X = np.random.default_rng(2).normal(size=(10, 6))
    X[:, 3] = 0.0
    base = f_e(X)
    f_e.params["W0"][3] += 7.0  # weights on a zero column cannot matter
    np.testing.assert_array_equal(f_e(X), base)


def test_two_tower_structure_and_symmetry():
    _, _, tt = small_models()
    assert tt.embed_dim == 8
    big = nn.TwoTowerModel.from_encoders(nn.build_genotype_encoder(12, 64), nn.build_env_encoder(6, 40))
    assert big.embed_dim == 8
    rng = np.random.default_rng(3)
    u, v, _ = tt.embeddings(rng.normal(size=(4, 12)), rng.normal(size=(4, 6)))
    assert u.shape == v.shape == (4, 8)
    np.testing.assert_allclose(np.einsum("nk,nk->n", v, u), np.einsum("nk,nk->n", u, v), atol=0)
    with pytest.raises(DataError):
        tt(rng.normal(size=(4, 12)), rng.normal(size=(3, 6)))


# ---------------------------------------------------------------- gradients


def test_encoder_gradient_check():
    f_g, *_ = small_models()
    errs = [nn.gradient_check(f_g, s) for s in nn.draw_check_points(f_g, 10, seed=4)]
    assert max(errs) < 1e-4


def test_env_encoder_gradient_check():
    _, f_e, _ = small_models()
    errs = [nn.gradient_check(f_e, s) for s in nn.draw_check_points(f_e, 10, seed=5)]
    assert max(errs) < 1e-4


def test_two_tower_gradient_check():
    *_, tt = small_models()
    errs = [nn.gradient_check(tt, s) for s in nn.draw_check_points(tt, 10, seed=6)]
    assert max(errs) < 1e-4


def test_gradient_check_refuses_kinks():
    f_g, *_ = small_models()
    x = np.random.default_rng(7).normal(size=(1, 12))
    pre = f_g.relu_preactivations(x)[0]
    f_g.params["s0"][0] -= pre[0, 0]  # move one pre-activation onto the kink
    with pytest.raises(ValueError):
        nn.gradient_check(f_g, (x, np.zeros(1)))


def test_zero_loss_point_has_zero_bias_gradient():
    f_g, *_ = small_models()
    x = nn.draw_check_points(f_g, 1, seed=8)[0][0]
    _, grads = nn._loss_and_grads(f_g, (x, f_g(x)))
    assert abs(grads["b_out"][0]) < 1e-10


# ---------------------------------------------------------------- training


def planted_linear(n=100, d=500, seed=9):
    rng = np.random.default_rng(seed)
    X = rng.integers(-1, 2, size=(n, d)).astype(float)
    w = rng.normal(size=d) / np.sqrt(d)
    return X, X @ w


def test_linear_targets_are_learned():
    X, y = planted_linear()
    m = nn.build_genotype_encoder(X.shape[1], 64, 2, dropout=0.0, seed=0)
    _, trace = nn.train_component(m, X, y, nn.TrainConfig(250, 16, 1e-3, 3e-4))
    assert trace[-1][1] < 1e-3


def test_zero_learning_rate_changes_nothing():
    X, y = planted_linear(40, 30)
    m = nn.build_genotype_encoder(30, 16, 2, seed=1)
    out, trace = nn.train_component(m, X, y, nn.TrainConfig(5, 16, 0.0, 3e-4))
    for k, v in m.params.items():
        np.testing.assert_array_equal(out.params[k], v)
    assert len({t[1] for t in trace}) == 1


def test_training_is_seeded():
    X, y = planted_linear(40, 30)
    m = nn.build_genotype_encoder(30, 16, 2, seed=1)
    cfg = nn.TrainConfig(5, 8, 1e-3, 3e-4, seed=3)
    _, a = nn.train_component(m, X, y, cfg, validation=(X[:5], y[:5]))
    _, b = nn.train_component(m, X, y, cfg, validation=(X[:5], y[:5]))
    assert a == b
    assert not np.isnan(a[-1][2])


def test_full_batch_descent_is_monotone():
    X, y = planted_linear(60, 40)
    m = nn.build_genotype_encoder(40, 16, 2, seed=2)
    _, trace = nn.train_component(m, X, y, nn.TrainConfig(50, 1, 1e-5, 0.0, optimizer="gd"))
    losses = [t[1] for t in trace]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_divergence_is_reported():
    X, y = planted_linear(20, 10)
    m = nn.build_genotype_encoder(10, 8, 2, dropout=0.0, seed=0)
    with pytest.raises(nn.TrainingError, match="learning rate"):
        nn.train_component(m, X, 1e300 * y, nn.TrainConfig(3, 4, 1e300, 0.0, optimizer="gd"))


def test_shifted_labels_shift_predictions():
    X, y = planted_linear(100, 60)
    m = nn.build_genotype_encoder(60, 32, 2, dropout=0.0, seed=0)
    cfg = nn.TrainConfig(250, 16, 1e-3, 0.0)
    a, _ = nn.train_component(m, X, y, cfg)
    b, _ = nn.train_component(m, X, y + 2.0, cfg)
    shift = np.mean(b(X) - a(X))
    assert shift == pytest.approx(2.0, rel=0.1)


# ---------------------------------------------------------------- structured fit


def _labels_for(d, zero_ge=False, seed=0):
    from gxe.mixed_model import fit_fa, generate_labels

    lab = generate_labels(fit_fa(d, seed=seed), d)
    if zero_ge:
        lab = LabelSets(lab.mu_hat, lab.genotype_ids, lab.environment_ids, lab.y_g, lab.y_e, np.zeros_like(lab.y_ge))
    return lab


@pytest.fixture(scope="module")
def desk_train():
    cfg = SimConfig(seed=0)
    d, t = simulate(cfg)
    return pl.with_env_vectors(d, d.environment_order()), t


def test_zero_interaction_labels_give_small_interaction(desk_train):
    d, _ = desk_train
    lab = _labels_for(d, zero_ge=True)
    models = nn.structured_fit(d, lab, nn.DESK, seed=0)
    rng = np.random.default_rng(10)
    xg = rng.integers(-1, 2, size=(200, d.genotypes.markers.shape[1])).astype(float)
    xe = d.environments.env_vector[rng.integers(0, len(d.environments.ids), 200)]
    assert np.mean(np.abs(models.f_ge(xg, xe))) < 0.05 * np.std(d.y)
    assert models.f_ge.embed_dim == 8


def test_zeroed_projections_reduce_to_additive(desk_train, tmp_path):
    d, _ = desk_train
    lab = _labels_for(d)
    models = nn.structured_fit(d, lab, replace(nn.DESK, ge=replace(nn.DESK.ge, epochs=2)), seed=1)
    xg = nn.genotype_features(d, lab.genotype_ids[:5])
    xe = nn.environment_features(d, lab.environment_ids[:5])
    back = nn.load_models(nn.save_models(tmp_path / "m.npz", models))
    np.testing.assert_array_equal(nn.predict_yield(back, back.mu_hat, xg, xe), nn.predict_yield(models, models.mu_hat, xg, xe))
    for k in models.f_ge.proj:
        models.f_ge.proj[k][...] = 0.0
    full = nn.predict_yield(models, models.mu_hat, xg, xe)
    add = models.mu_hat + models.f_g(xg) + models.f_e(xe)
    np.testing.assert_array_equal(full, add)
    assert isinstance(nn.predict_yield(models, 0.0, xg[0], xe[0]), float)
    with pytest.raises(DataError):
        nn.predict_yield(models, 0.0, xg[:, :-1], xe)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(DataError):
        nn.load_models(path)


def test_noise_free_additive_data_is_fitted():
    cfg = SimConfig(seed=3, lambda_scale=0.0, psi_range=(0.0, 0.0), resid_range=(0.0, 0.0), sigma_g2=1.0)
    d, t = simulate(cfg)
    d = pl.with_env_vectors(d, d.environment_order())
    lab = _labels_for(d)
    # a capacity check: dropout off and small batches so 100 genotypes and
    # 12 environments get enough optimizer steps
    D = nn.DESK
    cfgs = replace(D, arch=replace(D.arch, dropout=0.0), g=replace(D.g, batch_size=16), e=replace(D.e, batch_size=4))
    models = nn.structured_fit(d, lab, cfgs, seed=0)
    gi = {g: i for i, g in enumerate(t.genotype_ids)}
    ej = {e: j for j, e in enumerate(t.environment_ids)}
    true = np.array([t.mu + t.G[gi[g]] + t.E[ej[e]] for g, e in zip(d.genotype_id, d.environment_id)])
    pred = pl.neural_predict(models, d, d.genotype_id, d.environment_id)
    assert np.sqrt(np.mean((pred - true) ** 2)) < 0.1 * np.std(d.y)


def test_interaction_network_helps_ranking_on_new_cells():
    full, add = [], []
    for seed in range(5):
        cfg = SimConfig(seed=seed, n_g_test=60, n_e_test=6)
        d, _ = simulate(cfg)
        train, test = split_by_year(d, cfg.test_year)
        sc = split_test_scenarios(train, test)
        cells = pl.cell_targets(test.subset(sc.nGE))
        preds = pl.run_models(["mixinn"], train, cells, seed)
        full.append(ranking_metrics(cells.prediction_set(preds["mixinn"]))[1])
        add.append(ranking_metrics(cells.prediction_set(preds["mixinn_additive"]))[1])
    assert np.mean(full) >= np.mean(add)

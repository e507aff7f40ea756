import json

import numpy as np
import pytest

from censored_hybrid.datagen import GeneratorConfig, generate, split
from censored_hybrid.evaluation import rad
from censored_hybrid.gradients import FlatParams, ParamLayout
from censored_hybrid.model import BiasNetworkParams, MechanismParams
from censored_hybrid.trainer import (
    AdamState,
    FittedModel,
    RestartRecord,
    SNNModel,
    TrainConfig,
    adam_step,
    init_network,
    select_restart,
    snn_standardizer,
    stage1_run,
    stage2_run,
    train_sm_asg,
    train_smnn_adam_random,
    train_snn_adam,
    training_loss,
    tsl_train,
    worker_count,
)
from censored_hybrid.datagen import rng_for

RICH = dict(a=6, x1_max=3, x2_max=3, factor_prob=0.02)


def scalar_params(x=0.0):
    lay = ParamLayout(0, 0, 0, 0)
    return FlatParams(np.array([x, 0.0, 0.0]), lay)


def test_adam_first_step():
    cfg = TrainConfig()
    st = AdamState.zeros(3)
    st, out = adam_step(st, np.array([2.0, 0.0, 0.0]), scalar_params(), cfg)
    assert st.h == 1
    assert out.values[0] == 0.001 * 2 / (1e-8 + 2)
    assert out.values[0] == pytest.approx(0.001, abs=1e-10)
    assert out.values[1] == 0.0


def test_adam_zero_gradient_is_no_op():
    st, out = adam_step(AdamState.zeros(3), np.zeros(3), scalar_params(1.5), TrainConfig())
    np.testing.assert_array_equal(out.values, [1.5, 0, 0])


@pytest.mark.parametrize("beta1", [0.1, 0.5, 0.9, 0.99])
def test_adam_first_step_mhat_equals_g(beta1):
    cfg = TrainConfig(beta1=beta1)
    g = np.array([0.3, -7.0, 1e-3])
    st, _ = adam_step(AdamState.zeros(3), g, scalar_params(), cfg)
    np.testing.assert_allclose(st.m / (1 - beta1**st.h), g, rtol=1e-15)
    np.testing.assert_allclose(st.v / (1 - cfg.beta2**st.h), g * g, rtol=1e-12)


def test_adam_second_moment_lower_bound():
    rng = np.random.default_rng(0)
    cfg = TrainConfig()
    st, p = AdamState.zeros(3), scalar_params()
    for _ in range(500):
        g = rng.normal(size=3) * rng.uniform(0, 5)
        st, p = adam_step(st, g, p, cfg)
        assert np.all(st.v >= (1 - cfg.beta2) * g * g)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.zeros(4), scalar_params(), TrainConfig())


def test_config_defaults_and_guards():
    cfg = TrainConfig()
    assert (cfg.T, cfg.N_epochs, cfg.eta1, cfg.beta1, cfg.beta2, cfg.eps, cfg.width, cfg.restarts) == (
        245, 30, 0.001, 0.9, 0.999, 1e-8, 128, 10)
    assert cfg.gamma_value == 0.2
    assert TrainConfig(regime="serious").gamma_value == 1.4
    assert TrainConfig(regime="serious", gamma=0.5).gamma_value == 0.5
    for bad in (dict(beta1=1.0), dict(eta1=0), dict(eps=0), dict(T=0), dict(regime="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    assert "threads" not in cfg.resolved()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("CENSORED_HYBRID_THREADS", "3")
    assert worker_count(TrainConfig()) == 3
    assert worker_count(TrainConfig(threads=2)) == 2
    monkeypatch.setenv("CENSORED_HYBRID_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count(TrainConfig())


@pytest.fixture(scope="module")
def small():
    ds = generate(GeneratorConfig(n=3000, seed=1, bias_mode="network", **RICH))
    return split(ds)


def small_cfg(**kw):
    base = dict(T=100, N_epochs=3, restarts=3, width=8, seed=2)
    base.update(kw)
    return TrainConfig(**base)


def test_stage1_empty():
    ds = generate(GeneratorConfig(n=5)).take(slice(0, 0))
    with pytest.raises(ValueError):
        stage1_run(ds, TrainConfig())


def test_stage1_recovers_on_rich_data():
    ds = generate(GeneratorConfig(n=50_000, sigma=1.0, seed=0, **RICH))
    s1 = stage1_run(ds, TrainConfig(sigma=1.0), track_regret=True)
    assert abs(s1.recovered.b0 - 6) < 0.6 and abs(s1.recovered.c0 - 3) < 0.3
    assert abs(s1.recovered.ebar - 0.1) < 0.05
    assert s1.regret.at(50_000)[0] < s1.regret.at(1_000)[0]


def test_stage2_no_epochs_is_identity(small):
    tr, _ = small
    init = FlatParams.pack(MechanismParams(1, 2, [0.1, 0.2], [0.0, 0.1, 0.2]), init_network(rng_for(0), 8, 4))
    out = stage2_run(init, 0.1, tr, small_cfg(N_epochs=0))
    np.testing.assert_array_equal(out.values, init.values)
    assert out is not init


def test_stage2_zero_gradient_data(small):
    tr, _ = small
    # a fully saturated single batch with gamma = 0 gives a zero gradient
    part = tr.take(slice(0, 100))
    # core = a * (1 + 10) = 66 > 36 for every case
    mech = MechanismParams(0.0, 0.0, [0.0, 0.0], [0.0, 0.0, 0.0])
    init = FlatParams.pack(mech, BiasNetworkParams.zeros(8, 4, b3=10.0))
    out = stage2_run(init, 0.0, part, small_cfg(N_epochs=1, T=100), gamma=0.0)
    np.testing.assert_array_equal(out.values, init.values)


def test_stage2_batch_too_large(small):
    tr, _ = small
    init = FlatParams.pack(MechanismParams(1, 1, [0, 0], [0, 0, 0]), BiasNetworkParams.zeros(8, 4))
    with pytest.raises(ValueError):
        stage2_run(init, 0.0, tr.take(slice(0, 50)), small_cfg(T=51))


def test_epoch_carry(small):
    tr, _ = small
    cfg = small_cfg(N_epochs=3, T=400)
    init = FlatParams.pack(MechanismParams(4, 2, [0.1, 0.1], [0, 0, 0]), init_network(rng_for(3), 8, 4))
    snaps = []
    stage2_run(init, 0.1, tr, cfg, on_epoch_end=lambda ep, st, p, loss: snaps.append((st.copy(), p.values.copy())))
    nb = len(tr) // 400
    assert [s.h for s, _ in snaps] == [nb, 2 * nb, 3 * nb]
    # replay epoch 2 by hand starting from the moments that ended epoch 1
    from censored_hybrid.gradients import loss_and_grad
    from censored_hybrid.trainer import _batches

    st, params = snaps[0][0].copy(), FlatParams(snaps[0][1].copy(), init.layout)
    for b in _batches(tr, 400):
        _, g = loss_and_grad(params, b, cfg.gamma_value, 0.1)
        st, params = adam_step(st, -g, params, cfg)
    np.testing.assert_array_equal(params.values, snaps[1][1])
    np.testing.assert_array_equal(st.m, snaps[1][0].m)
    np.testing.assert_array_equal(st.v, snaps[1][0].v)


def test_remainder_cases_unused(small):
    tr, _ = small
    cfg = small_cfg(T=700, N_epochs=2)
    init = FlatParams.pack(MechanismParams(4, 2, [0.1, 0.1], [0, 0, 0]), init_network(rng_for(3), 8, 4))
    a = stage2_run(init, 0.1, tr, cfg)
    mod = tr.take(slice(None))
    mod.z = tr.z.copy()
    mod.z[700 * (len(tr) // 700):] = 7.0
    np.testing.assert_array_equal(stage2_run(init, 0.1, mod, cfg).values, a.values)


def test_stage2_lowers_training_loss():
    ds = generate(GeneratorConfig(n=20_000, seed=3, bias_mode="network", **RICH))
    tr, _ = split(ds)
    cfg = TrainConfig(seed=3, restarts=1)
    s1 = stage1_run(tr, cfg)
    rec = s1.recovered
    init = FlatParams.pack(MechanismParams(rec.b0, rec.c0, rec.p0, rec.q0),
                           init_network(rng_for(3, 10, 0), cfg.width, tr.m3))
    losses = []
    out = stage2_run(init, rec.ebar, tr, cfg, on_epoch_end=lambda ep, st, p, loss: losses.append(loss))
    assert len(losses) == 30
    before = training_loss(init, tr, cfg.gamma_value, rec.ebar)
    assert training_loss(out, tr, cfg.gamma_value, rec.ebar) < before


def test_tsl_single_restart_equals_stage2(small):
    tr, _ = small
    cfg = small_cfg(restarts=1)
    fit = tsl_train(tr, cfg)
    rec = fit.recovered
    init = FlatParams.pack(MechanismParams(rec.b0, rec.c0, rec.p0, rec.q0),
                           init_network(rng_for(cfg.seed, 10, 0), cfg.width, tr.m3))
    ref = stage2_run(init, rec.ebar, tr, cfg)
    mech, net = ref.unpack()
    assert fit.model.mech.b == mech.b
    np.testing.assert_array_equal(fit.model.net.A, net.A)
    assert len(fit.restarts) == 1 and fit.restarts[0].selected


def test_tsl_selection_is_argmax(small):
    tr, _ = small
    fit = tsl_train(tr, small_cfg(restarts=4))
    scores = [r.train_rad for r in fit.restarts]
    chosen = [r for r in fit.restarts if r.selected]
    assert len(chosen) == 1
    assert chosen[0].train_rad == max(scores)
    assert select_restart(fit.restarts) == chosen[0].restart
    assert rad(fit.predict(tr), tr.z).rad == chosen[0].train_rad


def test_select_restart_ties_go_first():
    recs = [RestartRecord(0, 0.5, 1.0), RestartRecord(1, 0.7, 1.0), RestartRecord(2, 0.7, 0.5)]
    assert select_restart(recs) == 1


def test_tsl_thread_count_invariance(small):
    tr, _ = small
    a = tsl_train(tr, small_cfg(restarts=4, threads=1))
    b = tsl_train(tr, small_cfg(restarts=4, threads=4))
    assert a.to_json() == b.to_json()


def test_smnn_deterministic(small):
    tr, _ = small
    a = train_smnn_adam_random(tr, small_cfg())
    b = train_smnn_adam_random(tr, small_cfg())
    assert a.to_json() == b.to_json()
    assert a.recovered is None and a.model.net is not None


def test_sm_asg_predictions_in_bounds(small):
    tr, te = small
    fit = train_sm_asg(tr, small_cfg())
    preds = fit.predict(te)
    assert np.all((preds >= te.lower) & (preds <= te.upper))
    assert fit.model.net is None
    assert "network" not in fit.to_dict()


@pytest.mark.xfail(strict=False, reason="recovered coefficients lose about 1 RAD point against the refined "
                   "model on some seeds; see the decisions ledger")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sm_asg_close_to_tsl_on_constant_bias(seed):
    ds = generate(GeneratorConfig(n=50_000, sigma=1.0, seed=seed, **RICH))
    tr, te = split(ds)
    cfg = TrainConfig(seed=seed, sigma=1.0, restarts=2, threads=2)
    s1 = stage1_run(tr, cfg)
    r_tsl = rad(tsl_train(tr, cfg, s1).predict(te), te.z).rad
    r_sm = rad(train_sm_asg(tr, cfg, s1).predict(te), te.z).rad
    assert abs(r_tsl - r_sm) <= 0.01, (r_tsl, r_sm)


def test_expanded_estimate_predicts_like_tsl_on_constant_bias():
    # the full stage-1 vector, used linearly, carries what the recovered coefficients drop
    ds = generate(GeneratorConfig(n=50_000, sigma=1.0, seed=0, **RICH))
    tr, te = split(ds)
    cfg = TrainConfig(seed=0, sigma=1.0, restarts=2, threads=2)
    s1 = stage1_run(tr, cfg)
    r_tsl = rad(tsl_train(tr, cfg, s1).predict(te), te.z).rad
    r_lin = rad(np.clip(te.phi_rows() @ s1.theta, te.lower, te.upper), te.z).rad
    assert abs(r_tsl - r_lin) <= 0.01


def test_snn_zero_weights_predict_saturated_bias(small):
    tr, te = small
    mean, scale = snn_standardizer(tr)
    lay = ParamLayout(0, 0, 8, 3 + tr.m1 + tr.m2 + tr.m3)
    vals = np.zeros(lay.size)
    vals[lay.slices["b3"]] = 50.0
    model = SNNModel(vals, lay, mean, scale)
    np.testing.assert_array_equal(model.predict(te), np.full(len(te), 36.0))


def test_snn_standardizer_constant_column(small):
    tr, _ = small
    mean, scale = snn_standardizer(tr)
    # a is constant in this dataset
    assert mean[0] == 0.0 and scale[0] == 1.0
    assert np.all(scale > 0)


def test_snn_training_loss_decreases(small):
    tr, _ = small
    losses = []
    cfg = small_cfg(N_epochs=30, width=16)
    from censored_hybrid import trainer

    fit = train_snn_adam(tr, cfg, on_epoch_end=lambda ep, st, p, loss: losses.append(loss))
    assert losses[-1] < losses[0]
    assert isinstance(fit.model, trainer.SNNModel)


def test_model_json_round_trip(small):
    tr, te = small
    for fit in (tsl_train(tr, small_cfg(restarts=2)), train_sm_asg(tr, small_cfg()),
                train_snn_adam(tr, small_cfg()), train_smnn_adam_random(tr, small_cfg())):
        back = FittedModel.from_json(fit.to_json())
        np.testing.assert_array_equal(back.predict(te), fit.predict(te))
        assert back.fingerprint == fit.fingerprint
        doc = json.loads(fit.to_json())
        assert doc["schema_version"] == 1 and doc["dataset_fingerprint"] == tr.fingerprint
    doc = json.loads(fit.to_json())
    doc["config"]["eta1"] = 0.5
    with pytest.raises(ValueError):
        FittedModel.from_json(json.dumps(doc))


def test_predict_dimension_mismatch(small):
    tr, _ = small
    fit = train_sm_asg(tr, small_cfg())
    other = generate(GeneratorConfig(n=20, m1=1))
    with pytest.raises(ValueError):
        fit.predict(other)

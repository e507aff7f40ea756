from types import SimpleNamespace

import numpy as np
import pytest

from censored_hybrid.gradients import (
    FlatParams,
    ParamLayout,
    as_batch,
    batch_grad,
    batch_loss,
    loss_and_grad,
    snn_loss_and_grad,
)
from censored_hybrid.model import (
    BiasNetworkParams,
    CaseRecord,
    HybridModel,
    MechanismParams,
    SaturationBounds,
    bias_forward,
    hybrid_predict,
)


def random_instance(rng, T=6, m1=2, m2=2, m=3, m3=2, lower=1.0, upper=1e3):
    mech = MechanismParams(rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(-0.3, 0.3, m1),
                           rng.uniform(-0.2, 0.2, m2))
    net = BiasNetworkParams(rng.normal(size=(1, m)) * 0.3, rng.normal(size=(m, m)), rng.normal(size=(m, m3)),
                            rng.normal(size=m), rng.normal(size=m), 0.1)
    batch = SimpleNamespace(
        a=rng.uniform(5, 15, T), x1=rng.integers(0, 4, T).astype(float), x2=rng.integers(0, 4, T).astype(float),
        V=rng.integers(0, 2, (T, m1)).astype(float), U=rng.choice([-1.0, 0.0, 1.0], (T, m2)),
        Eta=rng.normal(size=(T, m3)), lower=np.full(T, lower), upper=np.full(T, upper),
        z=rng.uniform(5, 40, T),
    )
    return FlatParams.pack(mech, net), batch


def fd_grad(theta, batch, gamma, ebar, h=1e-6):
    out = np.empty_like(theta.values)
    for i in range(out.size):
        e = np.zeros_like(out)
        e[i] = h
        up = batch_loss(FlatParams(theta.values + e, theta.layout), batch, gamma, ebar).loss
        dn = batch_loss(FlatParams(theta.values - e, theta.layout), batch, gamma, ebar).loss
        out[i] = (up - dn) / (2 * h)
    return out


def test_layout_size_and_round_trip():
    lay = ParamLayout(2, 3, 4, 5)
    assert lay.size == 2 + 2 + 3 + 4 + 16 + 20 + 8 + 1
    rng = np.random.default_rng(0)
    theta, _ = random_instance(rng, m1=2, m2=3, m=4, m3=5)
    mech, net = theta.unpack()
    again = FlatParams.pack(mech, net)
    np.testing.assert_array_equal(again.values, theta.values)
    assert mech.e == 0.0


def test_layout_is_column_major():
    lay = ParamLayout(0, 0, 2, 3)
    A = np.arange(6.0).reshape(2, 3)
    vals = lay.pack_arrays(0, 0, [], [], np.zeros((1, 2)), np.zeros((2, 2)), A, np.zeros(2), np.zeros(2), 0)
    np.testing.assert_array_equal(vals[lay.slices["A"]], [0, 3, 1, 4, 2, 5])
    np.testing.assert_array_equal(lay.unpack_arrays(vals)["A"], A)


def test_flat_shape_check():
    with pytest.raises(ValueError):
        FlatParams(np.zeros(3), ParamLayout(1, 1, 1, 1))


def test_loss_examples():
    lay = ParamLayout(0, 0, 1, 1)
    # zero network, b = c = 0: zhat = a
    theta = FlatParams(np.zeros(lay.size), lay)
    one = SimpleNamespace(a=np.array([13.0]), x1=np.zeros(1), x2=np.zeros(1), V=np.zeros((1, 0)),
                          U=np.zeros((1, 0)), Eta=np.zeros((1, 1)), lower=np.array([1.0]), upper=np.array([50.0]),
                          z=np.array([10.0]))
    assert batch_loss(theta, one, 0.0, 0.0).loss == pytest.approx(0.3)
    perfect = SimpleNamespace(**{**vars(one), "z": np.array([13.0])})
    assert batch_loss(theta, perfect, 1.4, 0.0).loss == 0.0
    # relerr 0.1, mean ehat - ebar = 0.05 with gamma 1.4
    vals = theta.values.copy()
    vals[lay.slices["b3"]] = 0.05
    rep = batch_loss(FlatParams(vals, lay), SimpleNamespace(**{**vars(one), "a": np.array([11.0 / 1.05])}), 1.4, 0.0)
    assert rep.relerr_term == pytest.approx(0.1)
    assert rep.reg_term == pytest.approx(0.07)
    assert rep.loss == pytest.approx(0.17)
    assert rep.mean_ehat == pytest.approx(0.05)


def test_loss_matches_per_case_forward():
    rng = np.random.default_rng(3)
    theta, batch = random_instance(rng, lower=10, upper=30)
    mech, net = theta.unpack()
    model = HybridModel(mech, net)
    cases = [CaseRecord(k, batch.a[k], batch.x1[k], batch.x2[k], batch.V[k], batch.U[k], batch.Eta[k],
                        SaturationBounds(10, 30), float(np.clip(batch.z[k], 10, 30))) for k in range(6)]
    zs = np.array([c.z for c in cases])
    preds = np.array([hybrid_predict(model, c) for c in cases])
    ehat = np.array([bias_forward(net, c.eta) for c in cases])
    rep = batch_loss(theta, cases, 0.2, 0.1)
    assert rep.relerr_term == pytest.approx(np.mean(np.abs(zs - preds) / zs), rel=1e-13)
    assert rep.reg_term == pytest.approx(0.2 * abs(ehat.mean() - 0.1), rel=1e-12)


def test_zero_and_negative_z_rejected():
    rng = np.random.default_rng(0)
    theta, batch = random_instance(rng)
    batch.z[2] = 0.0
    with pytest.raises(ValueError):
        batch_loss(theta, batch, 0.0, 0.0)
    with pytest.raises(ValueError):
        as_batch([])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(20):
        theta, batch = random_instance(rng)
        g = batch_grad(theta, batch, 0.2, 0.05)
        num = fd_grad(theta, batch, 0.2, 0.05)
        scale = np.maximum(np.abs(num), 1e-3)
        assert np.max(np.abs(g - num) / scale) < 1e-4
        checked += 1
    assert checked == 20


def test_fully_saturated_batch_has_zero_gradient():
    rng = np.random.default_rng(1)
    theta, batch = random_instance(rng, lower=1000.0, upper=2000.0)
    batch.z[:] = 1500.0
    g = batch_grad(theta, batch, 0.0, 0.0)
    np.testing.assert_array_equal(g, np.zeros_like(g))


def test_regularizer_gradient_is_network_only():
    rng = np.random.default_rng(2)
    theta, batch = random_instance(rng)
    with_reg = batch_grad(theta, batch, 1.4, -3.0)
    without = batch_grad(theta, batch, 0.0, -3.0)
    diff = with_reg - without
    lay = theta.layout
    np.testing.assert_array_equal(diff[lay.mechanism_slice], 0.0)
    assert np.any(diff[lay.network_slice] != 0)


def test_reordering_invariance():
    rng = np.random.default_rng(4)
    theta, batch = random_instance(rng, T=9)
    perm = rng.permutation(9)
    shuffled = SimpleNamespace(**{k: v[perm] for k, v in vars(batch).items()})
    r1, g1 = loss_and_grad(theta, batch, 0.2, 0.0)
    r2, g2 = loss_and_grad(theta, shuffled, 0.2, 0.0)
    assert r1.loss == pytest.approx(r2.loss, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_gradient_is_ascent_direction():
    rng = np.random.default_rng(5)
    for _ in range(10):
        theta, batch = random_instance(rng)
        g = batch_grad(theta, batch, 0.2, 0.0)
        t = 1e-7 / max(np.linalg.norm(g), 1e-12)
        base = batch_loss(theta, batch, 0.2, 0.0).loss
        up = batch_loss(FlatParams(theta.values + t * g, theta.layout), batch, 0.2, 0.0).loss
        assert up >= base


def test_clamp_boundary_counts_as_interior():
    lay = ParamLayout(0, 0, 1, 1)
    theta = FlatParams(np.zeros(lay.size), lay)
    # core = a = 30 sits exactly on the upper bound
    b = SimpleNamespace(a=np.array([30.0]), x1=np.array([1.0]), x2=np.zeros(1), V=np.zeros((1, 0)),
                        U=np.zeros((1, 0)), Eta=np.zeros((1, 1)), lower=np.array([6.0]), upper=np.array([30.0]),
                        z=np.array([20.0]))
    g = batch_grad(theta, b, 0.0, 0.0)
    assert g[lay.slices["b"]][0] == pytest.approx(1.0 / 20.0)


def test_sign_zero_conventions():
    lay = ParamLayout(0, 0, 1, 1)
    theta = FlatParams(np.zeros(lay.size), lay)
    b = SimpleNamespace(a=np.array([10.0]), x1=np.array([1.0]), x2=np.zeros(1), V=np.zeros((1, 0)),
                        U=np.zeros((1, 0)), Eta=np.zeros((1, 1)), lower=np.array([6.0]), upper=np.array([30.0]),
                        z=np.array([10.0]))
    # exact fit and mean ehat == ebar: both absolute values sit at their kinks
    np.testing.assert_array_equal(batch_grad(theta, b, 1.0, 0.0), np.zeros(lay.size))


def test_snn_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    lay = ParamLayout(0, 0, 4, 3)
    for _ in range(5):
        vals = rng.normal(size=lay.size)
        vals[lay.slices["b3"]] = 20.0
        X = rng.normal(size=(7, 3))
        lower, upper, z = np.full(7, 1.0), np.full(7, 500.0), rng.uniform(5, 40, 7)
        _, g = snn_loss_and_grad(vals, lay, X, lower, upper, z)
        num = np.empty(lay.size)
        for i in range(lay.size):
            e = np.zeros(lay.size)
            e[i] = 1e-6
            num[i] = (snn_loss_and_grad(vals + e, lay, X, lower, upper, z, False)[0]
                      - snn_loss_and_grad(vals - e, lay, X, lower, upper, z, False)[0]) / 2e-6
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-3)) < 1e-4

import hashlib

import numpy as np
import pytest

from censored_hybrid.datagen import (
    Dataset,
    GeneratorConfig,
    Truth,
    fingerprint,
    generate,
    mc_case_mean,
    split,
)
from censored_hybrid.model import HybridModel, NoiseModel, censored_mean, hybrid_predict


def test_degenerate_generator():
    cfg = GeneratorConfig(n=200, sigma=1e-9, factor_prob=0.0, e=0.0, a=10, x1_max=0, x2_max=0)
    ds = generate(cfg)
    np.testing.assert_allclose(ds.z, 10.0, atol=1e-7)
    assert np.all(ds.lower == 6) and np.all(ds.upper == 36)


def test_same_seed_same_bytes():
    cfg = GeneratorConfig(n=300, seed=9, bias_mode="network")
    a, b = generate(cfg), generate(cfg)
    assert hashlib.sha256(a.to_csv().encode()).hexdigest() == hashlib.sha256(b.to_csv().encode()).hexdigest()
    assert a.to_json() == b.to_json()
    assert generate(GeneratorConfig(n=300, seed=10, bias_mode="network")).to_csv() != a.to_csv()


def test_truth_does_not_depend_on_n():
    # truth and cases use separate streams
    a = generate(GeneratorConfig(n=100, seed=1))
    b = generate(GeneratorConfig(n=200, seed=1))
    np.testing.assert_array_equal(a.truth.theta, b.truth.theta)


def test_censoring_fraction_calibrated_truth():
    # fixed truth chosen so the minor regime censors about 15% of cases
    cfg = GeneratorConfig(n=50_000, seed=0, p=[0.3, 0.1], q=[0.1, 0.0, 0.0])
    ds = generate(cfg)
    # analytic oracle: mean probability of landing on a bound
    core = ds.phi_rows() @ ds.truth.theta
    lo, hi = (6 - core) / 5.0, (36 - core) / 5.0
    from scipy.stats import norm

    expected = float(np.mean(norm.cdf(lo) + norm.sf(hi)))
    assert abs(expected - 0.15) < 0.03
    assert abs(ds.censoring_fraction() - 0.15) < 0.03
    assert abs(ds.censoring_fraction() - expected) < 4 * np.sqrt(expected * (1 - expected) / 50_000)


def test_split_small_and_large():
    ds = generate(GeneratorConfig(n=10))
    tr, te = split(ds)
    assert len(tr) == 8 and len(te) == 2
    assert te.index.min() > tr.index.max()
    np.testing.assert_array_equal(np.concatenate([tr.z, te.z]), ds.z)
    np.testing.assert_array_equal(np.concatenate([tr.index, te.index]), ds.index)
    big = generate(GeneratorConfig(n=50_000))
    tr, te = split(big)
    assert (len(tr), len(te)) == (40_000, 10_000)
    with pytest.raises(ValueError):
        split(generate(GeneratorConfig(n=1)))


def test_mc_mean_matches_censored_mean():
    cfg = GeneratorConfig(n=20, seed=3, x1_max=3, x2_max=4)
    ds = generate(cfg)
    for i in range(5):
        core = float(ds.phi_rows(i, i + 1)[0] @ ds.truth.theta)
        mean, se = mc_case_mean(cfg, i, 1_000_000, seed=100 + i)
        assert abs(mean - censored_mean(core, ds.bounds(i), NoiseModel(5.0))) < 4 * se


def test_z_uses_truth_model():
    cfg = GeneratorConfig(n=500, seed=2, bias_mode="network", sigma=1e-9)
    ds = generate(cfg)
    model = HybridModel(ds.truth.mech, ds.truth.net)
    preds = np.array([hybrid_predict(model, c) for c in ds])
    np.testing.assert_allclose(ds.z, preds, atol=1e-6)


def test_network_truth_calibration():
    ds = generate(GeneratorConfig(n=20_000, seed=5, bias_mode="network", bias_std=0.15, e=0.1))
    from censored_hybrid.model import bias_forward_batch

    e = bias_forward_batch(ds.truth.net, ds.Eta)
    assert abs(e.mean() - 0.1) < 0.01
    assert abs(e.std() - 0.15) < 0.01


def test_nonpositive_terms_rejected():
    with pytest.raises(ValueError):
        generate(GeneratorConfig(n=100, a=1.0, b=-5.0, x1_max=3, factor_prob=0.5))
    with pytest.raises(ValueError):
        generate(GeneratorConfig(n=100, e=-2.0))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(regime="petty")
    with pytest.raises(ValueError):
        GeneratorConfig(p=[0.1])
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"n": 5, "colour": "red"})
    with pytest.raises(ValueError):
        GeneratorConfig(n=0)


def test_regime_defaults():
    res = GeneratorConfig(regime="serious").resolved()
    assert res["a"] == 40.0
    ds = generate(GeneratorConfig(n=50, regime="serious"))
    assert np.all(ds.lower == 36) and np.all(ds.upper == 120)


def test_csv_and_json_round_trip():
    ds = generate(GeneratorConfig(n=40, seed=4, bias_mode="network"))
    back = Dataset.from_csv(ds.to_csv())
    for name in ("index", "a", "x1", "x2", "V", "U", "Eta", "lower", "upper", "z"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.fingerprint == ds.fingerprint
    back = Dataset.from_json(ds.to_json())
    np.testing.assert_array_equal(back.z, ds.z)
    np.testing.assert_array_equal(back.truth.net.A, ds.truth.net.A)
    assert back.truth.mech.e == ds.truth.mech.e
    with pytest.raises(ValueError):
        Dataset.from_csv("index,a\n0,1\n")


def test_truth_round_trip():
    t = generate(GeneratorConfig(n=5, bias_mode="network")).truth
    back = Truth.from_dict(t.to_dict())
    np.testing.assert_array_equal(back.theta, t.theta)


def test_fingerprint_depends_on_config():
    a = generate(GeneratorConfig(n=5, seed=1)).fingerprint
    b = generate(GeneratorConfig(n=5, seed=2)).fingerprint
    assert a != b and len(a) == 16
    assert fingerprint({"x": 1, "y": [1, 2]}) == fingerprint({"y": [1, 2], "x": 1})


def test_growth_mode_bound():
    ds = generate(GeneratorConfig(n=5000, growth_epsilon=0.2, growth_scale=100.0))
    assert ds.a[-1] > ds.a[0]
    M = ds.growth_bound(0.2)
    comp = np.max(np.abs(ds.phi_rows()), axis=1)
    assert np.all(comp <= M * (np.arange(1, 5001) ** 0.2) * (1 + 1e-12))


def test_case_records_validate():
    ds = generate(GeneratorConfig(n=3))
    c = ds.case(1)
    assert c.index == 1 and c.bounds.lower == 6
    assert len(list(ds)) == 3

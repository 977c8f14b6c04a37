import numpy as np
import pytest
from scipy.stats import chisquare

from fedep import datagen as D
from fedep import models as M
from fedep.simulator import toy_fedep, toy_fedpa


def test_niw_validation():
    with pytest.raises(ValueError):
        D.NIWParams(nu=3.0)
    with pytest.raises(ValueError):
        D.NIWParams(psi=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        D.NIWParams(lam=0.0)


def test_large_lambda_collapses_means():
    specs, _ = D.sample_toy_clients(D.NIWParams(lam=1e12), 5, np.random.default_rng(0))
    for s in specs:
        assert np.linalg.norm(s.mean) < 1e-4


def test_inverse_wishart_mean():
    rng = np.random.default_rng(1)
    psi = np.array([[2.0, 0.6], [0.6, 1.0]])
    niw = D.NIWParams(psi=psi)
    covs = [D.sample_toy_clients(niw, 1, rng)[0][0].cov for _ in range(10_000)]
    mean = np.mean(covs, axis=0)
    expected = psi / (7 - 2 - 1)
    assert np.all(np.abs(mean - expected) <= 0.05 * np.abs(expected).max())
    for c in covs[:500]:
        np.linalg.cholesky(c)


def test_wishart_mean():
    rng = np.random.default_rng(2)
    scale = np.array([[1.0, 0.3], [0.3, 0.5]])
    draws = [D.sample_wishart(scale, 6, rng) for _ in range(20_000)]
    np.testing.assert_allclose(np.mean(draws, axis=0), 6 * scale, rtol=0.03, atol=0.03)


def test_fixture_properties():
    a, b = D.fixed_toy_fixture(), D.fixed_toy_fixture()
    for s, t in zip(a, b):
        assert np.array_equal(s.mean, t.mean) and np.array_equal(s.cov, t.cov)
    truth = D.true_global_mean(a)
    assert np.linalg.norm(toy_fedpa(a) - truth) >= 0.1
    ep, _ = toy_fedep(a)
    assert np.linalg.norm(ep - truth) < 1e-6


def test_true_global_mean_matches_closed_form():
    a = D.fixed_toy_fixture()
    p1, p2 = np.linalg.inv(a[0].cov), np.linalg.inv(a[1].cov)
    expected = np.linalg.inv(p1 + p2) @ (p1 @ a[0].mean + p2 @ a[1].mean)
    np.testing.assert_allclose(D.true_global_mean(a), expected, rtol=1e-12)


def test_high_concentration_gives_uniform_labels():
    cfg = D.FedClassConfig(n_clients=10, examples_per_client=500, num_classes=5, heterogeneity=1e6)
    shards, _ = D.gen_fed_classification(cfg, np.random.default_rng(3))
    for s in shards:
        counts = np.bincount(s.y, minlength=5)
        assert chisquare(counts).pvalue > 0.01


def test_low_concentration_is_skewed():
    cfg = D.FedClassConfig(n_clients=20, examples_per_client=200, num_classes=5, heterogeneity=0.05)
    shards, _ = D.gen_fed_classification(cfg, np.random.default_rng(4))
    top_share = [np.bincount(s.y, minlength=5).max() / len(s) for s in shards]
    assert np.median(top_share) > 0.8


def test_partition_sizes_and_determinism():
    cfg = D.FedClassConfig(n_clients=7, examples_per_client=13, test_size=50)
    shards, test = D.gen_fed_classification(cfg, np.random.default_rng(5))
    assert sum(len(s) for s in shards) == 7 * 13 and len(test) == 50
    assert len({s.client_id for s in shards}) == 7
    rows = np.vstack([s.x for s in shards])
    assert len(np.unique(rows, axis=0)) == len(rows)
    again, _ = D.gen_fed_classification(cfg, np.random.default_rng(5))
    assert all(np.array_equal(s.x, t.x) and np.array_equal(s.y, t.y) for s, t in zip(shards, again))


def test_label_noise_one_is_uniform_labels():
    cfg = D.FedClassConfig(n_clients=4, examples_per_client=2000, num_classes=4, heterogeneity=0.01, label_noise=1.0)
    shards, _ = D.gen_fed_classification(cfg, np.random.default_rng(6))
    for s in shards:
        assert chisquare(np.bincount(s.y, minlength=4)).pvalue > 0.001


def test_config_validation():
    for bad in (dict(n_clients=0), dict(num_classes=1), dict(heterogeneity=0.0), dict(label_noise=1.5)):
        with pytest.raises(ValueError):
            D.FedClassConfig(**bad)


def test_csv_round_trip(tmp_path):
    cfg = D.FedClassConfig(n_clients=3, examples_per_client=5, test_size=4)
    shards, _ = D.gen_fed_classification(cfg, np.random.default_rng(7))
    M.write_csv(shards, tmp_path / "t.csv")
    back = M.read_csv(tmp_path / "t.csv", input_dim=cfg.input_dim, num_classes=cfg.num_classes)
    for s, b in zip(shards, back):
        assert s.client_id == b.client_id and np.array_equal(s.x, b.x) and np.array_equal(s.y, b.y)

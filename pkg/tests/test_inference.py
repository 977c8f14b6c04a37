import numpy as np
import pytest

from fedep import gaussian as G
from fedep import inference as I
from fedep import models as M
from fedep.gaussian import MeanFieldGaussian as MFG
from fedep.inference import InferenceConfig, TiltedProblem
from fedep.models import DatasetShard


def classification_problem(rng, cavity=None, n=40, p=3, c=3):
    spec = M.logistic(p, c)
    shard = DatasetShard(rng.normal(size=(n, p)), rng.integers(0, c, n))
    cav = cavity if cavity is not None else G.improper_uniform(spec.param_dim)
    return TiltedProblem(spec, shard, cav, np.zeros(spec.param_dim))


def gaussian_problem(cav_eta, cav_lam, cov=((2.0, 0.5), (0.5, 1.0)), mean=(1.0, -1.0)):
    spec = M.gaussian_client(np.array(mean), np.array(cov))
    return TiltedProblem(spec, None, MFG(cav_eta, cav_lam), np.zeros(2))


def test_tilted_loss_reduces_to_nll_under_uniform_cavity():
    rng = np.random.default_rng(0)
    prob = classification_problem(rng)
    th = rng.normal(size=prob.spec.param_dim)
    assert I.tilted_loss(prob, th) == M.nll(prob.spec, th, prob.shard.x, prob.shard.y)


def test_tilted_loss_quadratic_term():
    rng = np.random.default_rng(1)
    d = M.logistic(3, 3).param_dim
    cav = MFG(rng.normal(size=d), rng.uniform(0.5, 2, size=d))
    prob = classification_problem(rng, cav)
    for i in range(d):
        e = np.eye(d)[i]
        diff = I.tilted_loss(prob, e) - M.nll(prob.spec, e, prob.shard.x, prob.shard.y)
        assert diff == pytest.approx(0.5 * cav.lam[i] - cav.eta[i], rel=1e-12)


def test_tilted_minimizer_is_product_mode_for_gaussian_client():
    prob = gaussian_problem([1.0, 2.0], [0.5, 3.0])
    P = prob.spec.precision + np.diag(prob.cavity.lam)
    m = np.linalg.solve(P, prob.spec.precision @ prob.spec.mean + prob.cavity.eta)
    g = I.tilted_grad(prob, m)
    np.testing.assert_allclose(g, 0, atol=1e-12)
    for _ in range(10):
        assert I.tilted_loss(prob, m + 1e-3 * np.random.default_rng(_).normal(size=2)) > I.tilted_loss(prob, m)


def test_tilted_dimension_mismatch():
    prob = gaussian_problem([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        I.tilted_loss(prob, np.zeros(3))
    with pytest.raises(ValueError):
        TiltedProblem(prob.spec, None, G.improper_uniform(3), np.zeros(2))


def test_moment_estimate_examples():
    m = I.moment_estimate([[0.0], [2.0]], 0.0)
    assert m.mu[0] == 1 and m.var[0] == 2.0  # unbiased two-point variance of {0, 2}
    s = np.array([[0.0, 0.0], [1.0, 3.0], [2.0, 6.0]])
    full = I.moment_estimate(s, 1.0)
    assert full.var[0] == full.var[1] == pytest.approx(np.mean(s.var(axis=0, ddof=1)))
    flat = I.moment_estimate([[1.0, 2.0]] * 4, 0.3)
    assert np.all(flat.var == 1e-12)
    with pytest.raises(ValueError):
        I.moment_estimate([[1.0]], 0.0)


def test_mcmc_mean_near_analytic_tilted_mean():
    prob = gaussian_problem([1.0, 2.0], [0.5, 3.0])
    P = prob.spec.precision + np.diag(prob.cavity.lam)
    m = np.linalg.solve(P, prob.spec.precision @ prob.spec.mean + prob.cavity.eta)
    # Start at the optimum region so every epoch's sample is converged.
    prob.init_theta = m + 0.1
    cfg = InferenceConfig(backend="mcmc", epochs=20, client_lr=0.01, momentum=0.9)
    q = I.mcmc_infer(prob, cfg, np.random.default_rng(0))
    assert q.is_proper
    assert np.max(np.abs(G.mode(q) - m)) < 1e-2


def test_mcmc_deterministic_and_proper():
    rng = np.random.default_rng(2)
    prob = classification_problem(rng)
    cfg = InferenceConfig(backend="mcmc", epochs=4, client_lr=0.01)
    a = I.mcmc_infer(prob, cfg, np.random.default_rng(5))
    b = I.mcmc_infer(prob, cfg, np.random.default_rng(5))
    assert np.array_equal(a.eta, b.eta) and np.array_equal(a.lam, b.lam)
    assert a.is_proper
    with pytest.raises(ValueError):
        I.mcmc_infer(prob, InferenceConfig(backend="mcmc", epochs=1), np.random.default_rng(0))


def test_zero_learning_rate_returns_init_theta():
    rng = np.random.default_rng(3)
    prob = classification_problem(rng)
    prob.init_theta = rng.normal(size=prob.spec.param_dim)
    cfg = InferenceConfig(backend="mcmc", epochs=3, client_lr=0.0)
    q = I.mcmc_infer(prob, cfg, rng)
    # Exact up to the rounding of the natural-parameter round trip.
    np.testing.assert_allclose(G.mode(q), prob.init_theta, rtol=1e-15)
    assert np.all(G.to_moments(q).var == 1e-12)
    q2 = I.scaled_identity_infer(prob, cfg, rng)
    np.testing.assert_allclose(G.mode(q2), prob.init_theta, rtol=1e-15)


def test_divergence_is_reported_with_epoch():
    rng = np.random.default_rng(4)
    prob = classification_problem(rng, MFG(np.zeros(12), np.full(12, 1e6)))
    prob.init_theta = np.ones(12)
    with pytest.raises(I.InferenceDiverged) as exc:
        I.sgd_samples(prob, InferenceConfig(epochs=200, client_lr=1.0), rng)
    assert exc.value.epoch >= 0


def test_scaled_identity_variance():
    rng = np.random.default_rng(5)
    prob = classification_problem(rng, n=100)
    q = I.scaled_identity_infer(prob, InferenceConfig(alpha_cov=5e-2, epochs=2), rng)
    np.testing.assert_allclose(G.to_moments(q).var, 5e-4, rtol=1e-12)
    np.testing.assert_allclose(q.lam, 100 / 5e-2, rtol=1e-12)


def linreg_problem(rng, cav_lam, n=6, p=3, noise_var=0.5):
    # Orthogonal design: the exact posterior covariance is diagonal.
    q, _ = np.linalg.qr(rng.normal(size=(n, p)))
    x = q * rng.uniform(1, 3, size=p)
    y = x @ rng.normal(size=p) + rng.normal(size=n)
    spec = M.linear_gaussian(p, noise_var)
    cav = MFG(rng.normal(size=p) * cav_lam, np.full(p, cav_lam))
    return TiltedProblem(spec, DatasetShard(x, y), cav, np.zeros(p))


def test_laplace_matches_conjugate_posterior_variance():
    rng = np.random.default_rng(6)
    prob = linreg_problem(rng, 0.7)
    x, s2 = prob.shard.x, prob.spec.noise_var
    exact_cov = np.linalg.inv(x.T @ x / s2 + np.diag(prob.cavity.lam))
    q = I.laplace_infer(prob, InferenceConfig(backend="laplace", epochs=3, client_lr=0.01), rng)
    np.testing.assert_allclose(G.to_moments(q).var, np.diag(exact_cov), rtol=1e-6)


def test_laplace_improper_cavity_reciprocal():
    spec = M.linear_gaussian(1, 1.0)
    prob = TiltedProblem(spec, DatasetShard(np.array([[2.0]]), np.array([1.0])), G.improper_uniform(1), np.zeros(1))
    q = I.laplace_infer(prob, InferenceConfig(backend="laplace", epochs=2), np.random.default_rng(0))
    assert G.to_moments(q).var[0] == pytest.approx(0.25)


def test_laplace_precision_is_fisher_plus_cavity():
    rng = np.random.default_rng(7)
    d = M.logistic(3, 3).param_dim
    cav = MFG(np.zeros(d), rng.uniform(0.1, 1, size=d))
    prob = classification_problem(rng, cav)
    cfg = InferenceConfig(backend="laplace", epochs=3)
    q = I.laplace_infer(prob, cfg, np.random.default_rng(1))
    mu = G.mode(q)
    fisher = M.diag_fisher(prob.spec, mu, prob.shard, exact=True)
    np.testing.assert_allclose(q.lam, len(prob.shard) * fisher + cav.lam, rtol=1e-10)


def test_laplace_floors_nonpositive_precision():
    rng = np.random.default_rng(8)
    d = M.logistic(3, 3).param_dim
    prob = classification_problem(rng, MFG(np.zeros(d), np.zeros(d)))
    prob.shard = DatasetShard(np.zeros((5, 3)), np.zeros(5, dtype=int))  # zero features: zero Fisher on weights
    diag = {}
    q = I.laplace_infer(prob, InferenceConfig(backend="laplace", epochs=2), rng, diag)
    assert q.is_proper and diag["floored"] > 0


def test_ngvi_fixed_point_in_one_step():
    rng = np.random.default_rng(9)
    prob = linreg_problem(rng, 0.3)
    cfg = InferenceConfig(backend="ngvi", epochs=2, ngvi_beta=0.0, ngvi_epochs=1, ngvi_samples=1)
    q = I.ngvi_infer(prob, cfg, rng)
    x, s2 = prob.shard.x, prob.spec.noise_var
    expected = 1 / (np.sum(x**2, axis=0) / s2 + prob.cavity.lam)
    np.testing.assert_allclose(G.to_moments(q).var, expected, rtol=1e-8)


def test_ngvi_ema_is_convex_combination():
    # With beta = 0.5 and one step from s0 = 0, s1 = F / 2 lies between 0 and F.
    rng = np.random.default_rng(10)
    prob = linreg_problem(rng, 0.0)
    cfg = InferenceConfig(backend="ngvi", epochs=2, ngvi_beta=0.5, ngvi_epochs=1)
    q = I.ngvi_infer(prob, cfg, rng)
    n_fisher = np.sum(prob.shard.x**2, axis=0) / prob.spec.noise_var
    assert np.all(q.lam >= 0) and np.all(q.lam <= n_fisher + 1e-12)
    np.testing.assert_allclose(q.lam, n_fisher / 2, rtol=1e-12)


def test_ngvi_on_classifier_is_proper():
    rng = np.random.default_rng(11)
    prob = classification_problem(rng)
    q = I.ngvi_infer(prob, InferenceConfig(backend="ngvi", epochs=2), rng)
    assert q.is_proper


def test_exact_diag_examples():
    diag_spec = M.gaussian_client(np.array([1.0, 2.0]), np.diag([2.0, 0.5]))
    prob = TiltedProblem(diag_spec, None, G.improper_uniform(2), np.zeros(2))
    q = I.exact_diag_infer(prob)
    np.testing.assert_allclose(G.mode(q), [1, 2], rtol=1e-14)
    np.testing.assert_allclose(G.to_moments(q).var, [2, 0.5], rtol=1e-14)
    corr = gaussian_problem([0.0, 0.0], [0.0, 0.0])
    q = I.exact_diag_infer(corr)
    np.testing.assert_allclose(G.mode(q), [1, -1], rtol=1e-12)
    np.testing.assert_allclose(G.to_moments(q).var, [2, 1], rtol=1e-12)


def kl_full_to_diag(m, cov, mu, var):
    return 0.5 * np.sum((np.diag(cov) + (m - mu) ** 2) / var + np.log(var))


def test_exact_diag_is_kl_optimal_under_perturbation():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(2, 2))
    prob = TiltedProblem(
        M.gaussian_client(rng.normal(size=2), a @ a.T + 0.5 * np.eye(2)), None, MFG(rng.normal(size=2), [0.4, 0.9]), np.zeros(2)
    )
    q = I.exact_diag_infer(prob)
    P = prob.spec.precision + np.diag(prob.cavity.lam)
    cov = np.linalg.inv(P)
    m = cov @ (prob.spec.precision @ prob.spec.mean + prob.cavity.eta)
    mom = G.to_moments(q)
    best = kl_full_to_diag(m, cov, mom.mu, mom.var)
    for dm in (-1e-3, 0, 1e-3):
        for dv in (-1e-3, 0, 1e-3):
            for i in range(2):
                mu, var = mom.mu.copy(), mom.var.copy()
                mu[i] += dm
                var[i] += dv
                assert kl_full_to_diag(m, cov, mu, var) >= best - 1e-15


def test_exact_diag_singular():
    prob = gaussian_problem([0.0, 0.0], [-100.0, -100.0])
    with pytest.raises(I.SingularTilted):
        I.exact_diag_infer(prob)
    with pytest.raises(ValueError):
        I.exact_diag_infer(classification_problem(np.random.default_rng(0)))


@pytest.mark.parametrize("backend", ["mcmc", "scaled-identity", "laplace", "ngvi"])
def test_every_backend_proper_and_deterministic(backend):
    rng = np.random.default_rng(13)
    prob = classification_problem(rng)
    cfg = InferenceConfig(backend=backend, epochs=3, client_lr=0.01)
    a = I.infer(prob, cfg, np.random.default_rng(3))
    b = I.infer(prob, cfg, np.random.default_rng(3))
    assert a.q.is_proper
    assert np.array_equal(a.q.eta, b.q.eta) and np.array_equal(a.q.lam, b.q.lam)
    assert np.isfinite(a.final_loss)


def test_config_validation():
    for bad in (dict(backend="nope"), dict(epochs=0), dict(mcmc_shrinkage=2.0), dict(alpha_cov=0.0), dict(ngvi_beta=1.0)):
        with pytest.raises(ValueError):
            InferenceConfig(**bad)

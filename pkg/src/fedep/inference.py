"""Approximate inference of a client's tilted distribution.

The tilted target is ``p_k(theta) * q_cav(theta)``; each backend returns a
proper diagonal Gaussian approximating it. The SGD-based backends all
minimise the same objective, :func:`tilted_loss`: the client NLL plus the
quadratic penalty ``0.5 theta' L_cav theta - eta_cav' theta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gaussian import MeanFieldGaussian, MomentsView, from_moments
from .models import DatasetShard, ModelSpec, check_batch, diag_fisher, grad_nll_unchecked, nll

log = logging.getLogger(__name__)

BACKENDS = ("exact", "mcmc", "scaled-identity", "laplace", "ngvi")
PRECISION_FLOOR = 1e-12
VARIANCE_FLOOR = 1e-12


class InferenceDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "tilted loss became non-finite"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class SingularTilted(ValueError):
    """The exact tilted precision is not positive definite."""


@dataclass
class InferenceConfig:
    backend: str = "scaled-identity"
    epochs: int = 10
    client_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    alpha_cov: float = 5e-2
    mcmc_shrinkage: float = 1e-4
    laplace_epochs: int = 5
    ngvi_epochs: int = 5
    ngvi_samples: int = 5
    ngvi_beta: float = 0.99
    # SGD steps that make up one "epoch" for data-free gaussian-client models.
    steps_per_epoch: int = 50

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        for name in ("epochs", "batch_size", "laplace_epochs", "ngvi_epochs", "ngvi_samples", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.client_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("client_lr must be >= 0 and momentum in [0, 1)")
        if self.alpha_cov <= 0:
            raise ValueError("alpha_cov must be > 0")
        if not 0 <= self.mcmc_shrinkage <= 1:
            raise ValueError("mcmc_shrinkage must lie in [0, 1]")
        if not 0 <= self.ngvi_beta < 1:
            raise ValueError("ngvi_beta must lie in [0, 1)")


@dataclass
class TiltedProblem:
    spec: ModelSpec
    shard: DatasetShard | None
    cavity: MeanFieldGaussian
    init_theta: np.ndarray

    def __post_init__(self):
        d = self.spec.param_dim
        self.init_theta = np.asarray(self.init_theta, dtype=float)
        if self.cavity.dim != d or self.init_theta.shape != (d,):
            raise ValueError(f"cavity/init_theta must have dimension {d}")
        if self.spec.kind != "gaussian-client" and self.shard is not None:
            # Validate once so the SGD loop can skip per-batch checks.
            check_batch(self.spec, self.shard.x, self.shard.y)

    @property
    def n_data(self) -> int:
        """|D_k|; data-free gaussian-client problems count as one."""
        if self.spec.kind == "gaussian-client" or self.shard is None:
            return 1
        return len(self.shard)


@dataclass
class InferenceResult:
    q: MeanFieldGaussian
    final_loss: float = float("nan")
    floored: int = 0
    extras: dict = field(default_factory=dict)


def _xy(problem: TiltedProblem, idx=None):
    if problem.spec.kind == "gaussian-client":
        return None, None
    s = problem.shard
    if idx is None:
        return s.x, s.y
    return s.x[idx], s.y[idx]


def tilted_loss(problem: TiltedProblem, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    cav = problem.cavity
    if theta.shape != (cav.dim,):
        raise ValueError(f"theta must have dimension {cav.dim}")
    x, y = _xy(problem)
    return nll(problem.spec, theta, x, y) + 0.5 * float(theta @ (cav.lam * theta)) - float(cav.eta @ theta)


def tilted_grad(problem: TiltedProblem, theta, idx=None) -> np.ndarray:
    """Gradient of the tilted loss; a minibatch ``idx`` is rescaled to the full shard."""
    x, y = _xy(problem, idx)
    g = grad_nll_unchecked(problem.spec, np.asarray(theta, dtype=float), x, y)
    if idx is not None and x is not None:
        g = g * (problem.n_data / len(idx))
    return g + problem.cavity.lam * theta - problem.cavity.eta


def sgd_samples(problem: TiltedProblem, cfg: InferenceConfig, rng: np.random.Generator, epochs: int | None = None):
    """Momentum SGD on the tilted loss, keeping the iterate after each epoch.

    Returns ``(samples, final_loss)``. Raises :class:`InferenceDiverged` as
    soon as an epoch ends with a non-finite iterate, or if the final loss is
    non-finite.
    """
    epochs = cfg.epochs if epochs is None else epochs
    theta = problem.init_theta.copy()
    velocity = np.zeros_like(theta)
    data_free = problem.spec.kind == "gaussian-client" or problem.shard is None
    n = problem.n_data
    samples = []
    loss = float("nan")
    for epoch in range(epochs):
        if data_free:
            batches = [None] * cfg.steps_per_epoch
        else:
            perm = rng.permutation(n)
            batches = [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        with np.errstate(over="ignore", invalid="ignore"):
            for idx in batches:
                velocity = cfg.momentum * velocity + tilted_grad(problem, theta, idx)
                theta = theta - cfg.client_lr * velocity
            finite = bool(np.all(np.isfinite(theta)))
            if finite and epoch == epochs - 1:
                loss = tilted_loss(problem, theta)
                finite = bool(np.isfinite(loss))
        if not finite:
            raise InferenceDiverged(epoch)
        samples.append(theta.copy())
    return samples, loss


def moment_estimate(samples, rho: float) -> MomentsView:
    """Sample mean and shrunk per-coordinate variance.

    ``var_i = (1 - rho) * s2_i + rho * mean_j(s2_j)``, floored at 1e-12, where
    ``s2`` is the unbiased sample variance.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or len(s) < 2:
        raise ValueError("moment_estimate needs at least 2 samples")
    s2 = s.var(axis=0, ddof=1)
    var = (1.0 - rho) * s2 + rho * s2.mean()
    return MomentsView(s.mean(axis=0), np.maximum(var, VARIANCE_FLOOR))


def mcmc_infer(problem: TiltedProblem, cfg: InferenceConfig, rng: np.random.Generator, diagnostics: dict | None = None):
    if cfg.epochs < 2:
        raise ValueError("mcmc needs epochs >= 2 to estimate a variance")
    samples, loss = sgd_samples(problem, cfg, rng)
    if diagnostics is not None:
        diagnostics["final_loss"] = loss
    return from_moments(moment_estimate(samples, cfg.mcmc_shrinkage))


def scaled_identity_infer(problem: TiltedProblem, cfg: InferenceConfig, rng: np.random.Generator, diagnostics=None):
    """SGD sample mean with covariance ``(alpha_cov / |D_k|) I``."""
    samples, loss = sgd_samples(problem, cfg, rng)
    if diagnostics is not None:
        diagnostics["final_loss"] = loss
    mu = np.mean(samples, axis=0)
    var = np.full_like(mu, cfg.alpha_cov / problem.n_data)
    return from_moments(MomentsView(mu, var))


def _floor_precision(lam: np.ndarray, diagnostics: dict | None) -> np.ndarray:
    bad = int(np.sum(~(lam > PRECISION_FLOOR)))
    if bad:
        log.debug("flooring %d non-positive precision entries", bad)
        if diagnostics is not None:
            diagnostics["floored"] = diagnostics.get("floored", 0) + bad
    return np.maximum(lam, PRECISION_FLOOR)


def _map_estimate(problem, cfg, rng, diagnostics):
    samples, loss = sgd_samples(problem, cfg, rng)
    if diagnostics is not None:
        diagnostics["final_loss"] = loss
    return samples[-1]


def laplace_infer(problem: TiltedProblem, cfg: InferenceConfig, rng: np.random.Generator, diagnostics=None):
    """Diagonal Laplace: precision ``|D_k| * Fisher + L_cav`` at the SGD MAP."""
    mu = _map_estimate(problem, cfg, rng, diagnostics)
    spec, shard = problem.spec, problem.shard
    exact = spec.kind == "linear-gaussian" or spec.num_classes <= 16
    if exact:
        fisher = diag_fisher(spec, mu, shard, exact=True)
    else:
        fisher = np.mean([diag_fisher(spec, mu, shard, rng, exact=False) for _ in range(cfg.laplace_epochs)], axis=0)
    lam = _floor_precision(problem.n_data * fisher + problem.cavity.lam, diagnostics)
    return MeanFieldGaussian(lam * mu, lam)


def ngvi_infer(problem: TiltedProblem, cfg: InferenceConfig, rng: np.random.Generator, diagnostics=None):
    """Natural-gradient VI for the covariance, mean held at the SGD MAP.

    ``s_t = beta s_{t-1} + (1 - beta) E[Fisher]`` with the expectation over
    ``ngvi_samples`` draws from the current approximation; the precision is
    ``|D_k| s_t + L_cav``. Starts from ``s_0 = 0`` and variance
    ``alpha_cov / |D_k|``.
    """
    mu = _map_estimate(problem, cfg, rng, diagnostics)
    n = problem.n_data
    s = np.zeros_like(mu)
    var = np.full_like(mu, cfg.alpha_cov / n)
    lam = 1.0 / var
    for _ in range(cfg.ngvi_epochs):
        draws = mu + np.sqrt(var) * rng.standard_normal((cfg.ngvi_samples, mu.size))
        fisher = np.mean([diag_fisher(problem.spec, th, problem.shard, rng) for th in draws], axis=0)
        s = cfg.ngvi_beta * s + (1.0 - cfg.ngvi_beta) * fisher
        lam = _floor_precision(n * s + problem.cavity.lam, diagnostics)
        var = 1.0 / lam
    return MeanFieldGaussian(lam * mu, lam)


def exact_diag_infer(problem: TiltedProblem, diagnostics=None) -> MeanFieldGaussian:
    """Moment-matched diagonal projection of an exactly Gaussian tilted density."""
    spec = problem.spec
    if spec.kind != "gaussian-client":
        raise ValueError("exact inference is only available for gaussian-client models")
    prec = spec.precision + np.diag(problem.cavity.lam)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise SingularTilted("tilted precision is not positive definite") from None
    cov = np.linalg.inv(chol).T @ np.linalg.inv(chol)
    mean = cov @ (spec.precision @ spec.mean + problem.cavity.eta)
    var = np.diag(cov)
    if diagnostics is not None:
        diagnostics["final_loss"] = tilted_loss(problem, mean)
    return MeanFieldGaussian(mean / var, 1.0 / var)


def infer(problem: TiltedProblem, cfg: InferenceConfig, rng: np.random.Generator) -> InferenceResult:
    diagnostics: dict = {}
    if cfg.backend == "exact":
        q = exact_diag_infer(problem, diagnostics)
    elif cfg.backend == "mcmc":
        q = mcmc_infer(problem, cfg, rng, diagnostics)
    elif cfg.backend == "scaled-identity":
        q = scaled_identity_infer(problem, cfg, rng, diagnostics)
    elif cfg.backend == "laplace":
        q = laplace_infer(problem, cfg, rng, diagnostics)
    else:
        q = ngvi_infer(problem, cfg, rng, diagnostics)
    return InferenceResult(q, diagnostics.get("final_loss", float("nan")), diagnostics.get("floored", 0))

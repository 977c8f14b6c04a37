"""Synthetic clients: NIW-sampled Gaussian clients and label-skewed classification shards."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import DatasetShard, ModelSpec, gaussian_client


@dataclass
class NIWParams:
    mu0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    lam: float = 0.2
    nu: float = 7.0
    psi: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=float)
        d = self.mu0.size
        if self.psi.shape != (d, d):
            raise ValueError("psi must be d x d matching mu0")
        if not np.allclose(self.psi, self.psi.T) or np.any(np.linalg.eigvalsh(self.psi) <= 0):
            raise ValueError("psi must be symmetric positive definite")
        if self.nu <= d + 1:
            raise ValueError(f"nu must exceed d + 1 = {d + 1} for a finite mean")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")


def random_spd(d: int, rng: np.random.Generator, ridge: float = 0.1) -> np.ndarray:
    """``A'A + ridge * I`` with standard normal ``A``."""
    a = rng.standard_normal((d, d))
    return a.T @ a + ridge * np.eye(d)


def sample_wishart(scale: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Bartlett decomposition: ``W = L A A' L'`` with ``scale = L L'``."""
    d = scale.shape[0]
    chol = np.linalg.cholesky(scale)
    a = np.tril(rng.standard_normal((d, d)), k=-1)
    a[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    la = chol @ a
    return la @ la.T


def sample_inv_wishart(psi: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from ``W^-1(psi, df)`` as the inverse of a ``W(psi^-1, df)`` draw."""
    w = sample_wishart(np.linalg.inv(psi), df, rng)
    sigma = np.linalg.inv(w)
    return 0.5 * (sigma + sigma.T)


def _is_spd(m: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.isfinite(m)))


def sample_toy_clients(niw: NIWParams, k: int, rng: np.random.Generator, max_attempts: int = 100):
    """Sample ``k`` gaussian-client specs from the normal-inverse-Wishart.

    Returns ``(specs, resampled)``; non-SPD covariance draws are redrawn.
    """
    specs = []
    resampled = 0
    for _ in range(k):
        for _attempt in range(max_attempts):
            sigma = sample_inv_wishart(niw.psi, niw.nu, rng)
            if _is_spd(sigma):
                break
            resampled += 1
        else:
            raise RuntimeError(f"no SPD covariance after {max_attempts} attempts")
        mu = rng.multivariate_normal(niw.mu0, sigma / niw.lam)
        specs.append(gaussian_client(mu, sigma))
    return specs, resampled


# Anisotropic, oppositely correlated pair for which the product of the
# diagonal projections misses the true global mean by about 1.16.
_FIXTURE = (
    ([2.0, 0.0], [[1.0, 0.9], [0.9, 1.0]]),
    ([-1.0, 1.5], [[2.0, -1.2], [-1.2, 1.0]]),
)


def fixed_toy_fixture() -> list[ModelSpec]:
    return [gaussian_client(np.array(m), np.array(c)) for m, c in _FIXTURE]


def true_global_mean(specs: list[ModelSpec]) -> np.ndarray:
    """Mode of the product of full-covariance client Gaussians."""
    prec = sum(s.precision for s in specs)
    return np.linalg.solve(prec, sum(s.precision @ s.mean for s in specs))


@dataclass
class FedClassConfig:
    n_clients: int = 50
    examples_per_client: int = 100
    input_dim: int = 10
    num_classes: int = 5
    heterogeneity: float = 0.3
    label_noise: float = 0.0
    test_size: int = 2000
    class_sep: float = 1.0

    def __post_init__(self):
        for name in ("n_clients", "examples_per_client", "input_dim", "num_classes", "test_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.heterogeneity <= 0:
            raise ValueError("heterogeneity (label concentration) must be > 0")
        if not 0 <= self.label_noise <= 1:
            raise ValueError("label_noise must lie in [0, 1]")


def gen_fed_classification(cfg: FedClassConfig, rng: np.random.Generator):
    """Label-skewed federated classification data.

    Class centres are ``N(0, class_sep^2 I)``; each client draws its label
    mix from a symmetric Dirichlet with concentration ``heterogeneity``
    (small means skewed clients) and features from unit-variance clusters.
    A fraction ``label_noise`` of labels is replaced uniformly at random.
    The test set is drawn from the balanced global mixture.

    Returns ``(train_shards, test_shard)``.
    """
    c, p = cfg.num_classes, cfg.input_dim
    centres = cfg.class_sep * rng.standard_normal((c, p))

    def draw(labels):
        x = centres[labels] + rng.standard_normal((len(labels), p))
        noisy = rng.random(len(labels)) < cfg.label_noise
        labels = labels.copy()
        labels[noisy] = rng.integers(0, c, size=int(noisy.sum()))
        return x, labels

    shards = []
    width = len(str(cfg.n_clients - 1))
    for k in range(cfg.n_clients):
        mix = rng.dirichlet(np.full(c, cfg.heterogeneity))
        labels = rng.choice(c, size=cfg.examples_per_client, p=mix)
        x, y = draw(labels)
        shards.append(DatasetShard(x, y, f"c{k:0{width}d}"))
    x, y = draw(rng.integers(0, c, size=cfg.test_size))
    return shards, DatasetShard(x, y, "test")

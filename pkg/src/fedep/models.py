"""Client likelihoods over a flat parameter vector.

Parameter layouts (row-major throughout):

* ``logistic``: ``W`` (C x p) followed by ``b`` (C); ``d = C * (p + 1)``.
* ``mlp``: ``W1`` (h x p), ``b1`` (h), ``W2`` (C x h), ``b2`` (C); tanh hidden layer.
* ``linear-gaussian``: regression weights ``w`` (p); ``y ~ N(w.x, noise_var)``.
* ``gaussian-client``: the client *is* a density ``N(theta; mean, cov)`` over
  ``theta``; data arguments are ignored.

All losses are sums over the batch, never means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

KINDS = ("logistic", "mlp", "gaussian-client", "linear-gaussian")
CLASSIFIERS = ("logistic", "mlp")

# Above this many classes the Fisher expectation over labels is sampled.
EXACT_FISHER_MAX_CLASSES = 16


class UnsupportedOperation(TypeError):
    """The operation is not defined for this model kind."""


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str
    input_dim: int = 0
    num_classes: int = 0
    hidden_dim: int = 0
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    noise_var: float = 1.0
    _cov_inv: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "gaussian-client":
            mean = np.array(self.mean, dtype=float).reshape(-1)
            cov = np.array(self.cov, dtype=float)
            if cov.shape != (mean.size, mean.size):
                raise ValueError("gaussian-client cov must be d x d matching mean")
            if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("gaussian-client cov must be symmetric positive definite")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "cov", cov)
            object.__setattr__(self, "_cov_inv", np.linalg.inv(cov))
            return
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind in CLASSIFIERS and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ValueError("mlp needs hidden_dim >= 1")
        if self.kind == "linear-gaussian" and self.noise_var <= 0:
            raise ValueError("noise_var must be > 0")

    @property
    def param_dim(self) -> int:
        p, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic":
            return c * (p + 1)
        if self.kind == "mlp":
            return h * (p + 1) + c * (h + 1)
        if self.kind == "linear-gaussian":
            return p
        return self.mean.size

    @property
    def precision(self) -> np.ndarray:
        """Inverse covariance of a gaussian-client spec."""
        return self._cov_inv


def logistic(input_dim: int, num_classes: int) -> ModelSpec:
    return ModelSpec("logistic", input_dim=input_dim, num_classes=num_classes)


def mlp(input_dim: int, hidden_dim: int, num_classes: int) -> ModelSpec:
    return ModelSpec("mlp", input_dim=input_dim, num_classes=num_classes, hidden_dim=hidden_dim)


def gaussian_client(mean, cov) -> ModelSpec:
    return ModelSpec("gaussian-client", mean=mean, cov=cov)


def linear_gaussian(input_dim: int, noise_var: float = 1.0) -> ModelSpec:
    return ModelSpec("linear-gaussian", input_dim=input_dim, noise_var=noise_var)


@dataclass(eq=False)
class DatasetShard:
    """One client's examples: features ``x`` (n x p) and labels ``y`` (n,)."""

    x: np.ndarray
    y: np.ndarray
    client_id: str = "0"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[None, :]
        self.y = np.asarray(self.y)
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same number of rows")
        if len(self.x) == 0:
            raise ValueError("shard must be non-empty")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> DatasetShard:
        return DatasetShard(self.x[idx], self.y[idx], self.client_id)


def empty_shard(client_id: str = "0") -> DatasetShard:
    """Placeholder data for gaussian-client clients (one dummy row)."""
    return DatasetShard(np.zeros((1, 1)), np.zeros(1, dtype=int), client_id)


def _check_theta(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.param_dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({spec.param_dim},)")
    return theta


def check_batch(spec: ModelSpec, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"features have dimension {x.shape[1]}, model expects {spec.input_dim}")
    y = np.asarray(y)
    if spec.kind in CLASSIFIERS:
        y = y.astype(int)
        if np.any((y < 0) | (y >= spec.num_classes)):
            raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return x, y


def _unpack(spec: ModelSpec, theta: np.ndarray):
    p, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "logistic":
        return theta[: c * p].reshape(c, p), theta[c * p :]
    i = h * p
    w1 = theta[:i].reshape(h, p)
    b1 = theta[i : i + h]
    i += h
    w2 = theta[i : i + c * h].reshape(c, h)
    b2 = theta[i + c * h :]
    return w1, b1, w2, b2


def _forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray):
    """Return logits and the hidden activations (None for logistic)."""
    if spec.kind == "logistic":
        w, b = _unpack(spec, theta)
        return x @ w.T + b, None
    w1, b1, w2, b2 = _unpack(spec, theta)
    hidden = np.tanh(x @ w1.T + b1)
    return hidden @ w2.T + b2, hidden


def _backward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, hidden, g_logits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. theta given d(loss)/d(logits) summed over rows."""
    if spec.kind == "logistic":
        return np.concatenate([(g_logits.T @ x).ravel(), g_logits.sum(axis=0)])
    _, _, w2, _ = _unpack(spec, theta)
    g_pre = (g_logits @ w2) * (1.0 - hidden**2)
    return np.concatenate(
        [(g_pre.T @ x).ravel(), g_pre.sum(axis=0), (g_logits.T @ hidden).ravel(), g_logits.sum(axis=0)]
    )


def _backward_sq(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, hidden, g_logits, weights) -> np.ndarray:
    """Sum over rows of ``weights[i] * (per-example gradient)**2``."""
    wcol = weights[:, None]
    if spec.kind == "logistic":
        g2 = g_logits**2 * wcol
        return np.concatenate([(g2.T @ x**2).ravel(), g2.sum(axis=0)])
    _, _, w2, _ = _unpack(spec, theta)
    g_pre = (g_logits @ w2) * (1.0 - hidden**2)
    gp2 = g_pre**2 * wcol
    g2 = g_logits**2 * wcol
    return np.concatenate([(gp2.T @ x**2).ravel(), gp2.sum(axis=0), (g2.T @ hidden**2).ravel(), g2.sum(axis=0)])


def nll(spec: ModelSpec, theta, x=None, y=None) -> float:
    """Negative log-likelihood summed over the batch.

    For a gaussian-client spec this is ``0.5 (theta-mean)' cov^-1 (theta-mean)``
    and the batch is ignored.
    """
    theta = _check_theta(spec, theta)
    if spec.kind == "gaussian-client":
        r = theta - spec.mean
        return 0.5 * float(r @ spec.precision @ r)
    x, y = check_batch(spec, x, y)
    if spec.kind == "linear-gaussian":
        r = y - x @ theta
        return float(0.5 * np.sum(r**2) / spec.noise_var + 0.5 * len(r) * np.log(2 * np.pi * spec.noise_var))
    logits, _ = _forward(spec, theta, x)
    logp = log_softmax(logits, axis=1)
    return -float(np.sum(logp[np.arange(len(y)), y]))


def grad_nll(spec: ModelSpec, theta, x=None, y=None) -> np.ndarray:
    theta = _check_theta(spec, theta)
    if spec.kind == "gaussian-client":
        return spec.precision @ (theta - spec.mean)
    x, y = check_batch(spec, x, y)
    return grad_nll_unchecked(spec, theta, x, y)


def grad_nll_unchecked(spec: ModelSpec, theta: np.ndarray, x, y) -> np.ndarray:
    """:func:`grad_nll` without input validation, for inner SGD loops."""
    if spec.kind == "gaussian-client":
        return spec.precision @ (theta - spec.mean)
    if spec.kind == "linear-gaussian":
        return -(x.T @ (y - x @ theta)) / spec.noise_var
    logits, hidden = _forward(spec, theta, x)
    g = np.exp(logits - logits.max(axis=1, keepdims=True))
    g /= g.sum(axis=1, keepdims=True)
    g[np.arange(len(y)), y] -= 1.0
    return _backward(spec, theta, x, hidden, g)


def predict_proba(spec: ModelSpec, theta, x) -> np.ndarray:
    """Class probabilities, shape ``(n, C)`` (or ``(C,)`` for a single row)."""
    if spec.kind not in CLASSIFIERS:
        raise UnsupportedOperation(f"predict_proba is undefined for {spec.kind!r}")
    theta = _check_theta(spec, theta)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"features have dimension {x.shape[1]}, model expects {spec.input_dim}")
    probs = softmax(_forward(spec, theta, x)[0], axis=1)
    return probs[0] if single else probs


def diag_fisher(
    spec: ModelSpec,
    theta,
    shard: DatasetShard,
    rng: np.random.Generator | None = None,
    exact: bool | None = None,
    n_draws: int = 1,
) -> np.ndarray:
    """Per-example diagonal Fisher with labels drawn from the model itself.

    Inputs come from the shard, outputs ``y ~ p(y | x, theta)``. With
    ``exact`` (the default when C <= 16) the expectation over ``y`` is taken
    by enumeration; otherwise ``n_draws`` labels per example are sampled.
    The result is averaged over examples, so multiply by ``len(shard)`` for
    the whole-shard quantity.
    """
    if spec.kind == "gaussian-client":
        raise UnsupportedOperation("diag_fisher is undefined for gaussian-client")
    theta = _check_theta(spec, theta)
    if shard is None or len(shard) == 0:
        raise ValueError("diag_fisher needs a non-empty shard")
    x, _ = check_batch(spec, shard.x, shard.y)
    n = len(x)
    if spec.kind == "linear-gaussian":
        # E_y[((y - w.x) x / s2)^2] = x^2 / s2, in closed form.
        return np.sum(x**2, axis=0) / (n * spec.noise_var)

    if exact is None:
        exact = spec.num_classes <= EXACT_FISHER_MAX_CLASSES
    logits, hidden = _forward(spec, theta, x)
    probs = softmax(logits, axis=1)
    total = np.zeros(spec.param_dim)
    if exact:
        for c in range(spec.num_classes):
            g = probs.copy()
            g[:, c] -= 1.0
            total += _backward_sq(spec, theta, x, hidden, g, probs[:, c])
        return total / n
    if rng is None:
        raise ValueError("sampled Fisher needs an rng")
    ones = np.ones(n)
    cdf = np.cumsum(probs, axis=1)
    for _ in range(n_draws):
        u = rng.random(n)[:, None]
        labels = np.minimum((u > cdf).sum(axis=1), spec.num_classes - 1)
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        total += _backward_sq(spec, theta, x, hidden, g, ones)
    return total / (n * n_draws)


def write_csv(shards: list[DatasetShard], path) -> None:
    """Write shards as ``f0..f{p-1},label,client_id`` rows (lossless floats)."""
    shards = list(shards)
    p = shards[0].x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(p)] + ["label", "client_id"])
        for shard in shards:
            for row, label in zip(shard.x, shard.y):
                w.writerow([repr(float(v)) for v in row] + [int(label), shard.client_id])


def read_csv(path, input_dim: int | None = None, num_classes: int | None = None) -> list[DatasetShard]:
    """Load a dataset CSV, grouping rows by ``client_id`` in first-seen order."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        p = len(header) - 2
        expected = [f"f{j}" for j in range(p)] + ["label", "client_id"]
        if p < 1 or header != expected:
            raise ValueError(f"{path}: header must be f0..f{{n-1}},label,client_id")
        if input_dim is not None and p != input_dim:
            raise ValueError(f"{path}: {p} feature columns, expected {input_dim}")
        rows: dict[str, tuple[list, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != p + 2:
                raise ValueError(f"{path}:{lineno}: expected {p + 2} columns, got {len(row)}")
            label = int(row[p])
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValueError(f"{path}:{lineno}: label {label} out of range")
            xs, ys = rows.setdefault(row[p + 1], ([], []))
            xs.append([float(v) for v in row[:p]])
            ys.append(label)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return [DatasetShard(np.array(xs), np.array(ys, dtype=int), cid) for cid, (xs, ys) in rows.items()]

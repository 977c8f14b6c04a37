"""Mean-field Gaussians in natural parameters.

A diagonal Gaussian is stored as ``(eta, lam)`` with ``lam = 1 / var`` and
``eta = lam * mu``. Products and quotients are then plain additions and
subtractions, which is what the EP server and clients do all day.

Zero and negative precision entries are allowed: cavities and update
messages are routinely improper. Only the moment view, the mode and
sampling require every precision entry to be strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Operands have incompatible (or invalid) dimensions."""


class NotProperError(ValueError):
    """Operation needs a proper Gaussian but some precision entry is <= 0."""


def _vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MeanFieldGaussian:
    eta: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        eta = _vector(self.eta, "eta")
        lam = _vector(self.lam, "lam")
        if eta.size == 0:
            raise DimensionError("dimension must be >= 1")
        if eta.shape != lam.shape:
            raise DimensionError(f"eta has length {eta.size} but lam has length {lam.size}")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.eta.size

    @property
    def is_proper(self) -> bool:
        return bool(np.all(self.lam > 0))

    def __mul__(self, other: MeanFieldGaussian) -> MeanFieldGaussian:
        return product(self, other)

    def __truediv__(self, other: MeanFieldGaussian) -> MeanFieldGaussian:
        return quotient(self, other)

    def __pow__(self, c: float) -> MeanFieldGaussian:
        return power(self, c)

    def allclose(self, other: MeanFieldGaussian, rtol: float = 1e-12, atol: float = 0.0) -> bool:
        return (
            self.dim == other.dim
            and np.allclose(self.eta, other.eta, rtol=rtol, atol=atol)
            and np.allclose(self.lam, other.lam, rtol=rtol, atol=atol)
        )

    def to_dict(self) -> dict:
        return {"d": self.dim, "eta": self.eta.tolist(), "lam": self.lam.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> MeanFieldGaussian:
        g = cls(data["eta"], data["lam"])
        if g.dim != int(data["d"]):
            raise DimensionError(f"declared d={data['d']} but vectors have length {g.dim}")
        return g

    def __repr__(self) -> str:
        return f"MeanFieldGaussian(eta={self.eta.tolist()}, lam={self.lam.tolist()})"


@dataclass(frozen=True, eq=False)
class MomentsView:
    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = _vector(self.mu, "mu")
        var = _vector(self.var, "var")
        if mu.shape != var.shape or mu.size == 0:
            raise DimensionError("mu and var must be non-empty with equal length")
        if np.any(var <= 0):
            raise NotProperError("variances must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)


@dataclass(frozen=True, eq=False)
class GaussianDelta:
    """Signed natural-parameter difference sent from a client to the server."""

    d_eta: np.ndarray
    d_lam: np.ndarray

    def __post_init__(self):
        d_eta = _vector(self.d_eta, "d_eta")
        d_lam = _vector(self.d_lam, "d_lam")
        if d_eta.shape != d_lam.shape:
            raise DimensionError("d_eta and d_lam must have equal length")
        object.__setattr__(self, "d_eta", d_eta)
        object.__setattr__(self, "d_lam", d_lam)

    @property
    def dim(self) -> int:
        return self.d_eta.size

    def as_gaussian(self) -> MeanFieldGaussian:
        return MeanFieldGaussian(self.d_eta, self.d_lam)


def _check_dims(a: MeanFieldGaussian, b: MeanFieldGaussian) -> None:
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")


def improper_uniform(d: int) -> MeanFieldGaussian:
    """The flat density: identity element for `product`."""
    if d < 1:
        raise DimensionError(f"dimension must be >= 1, got {d}")
    return MeanFieldGaussian(np.zeros(d), np.zeros(d))


def product(a: MeanFieldGaussian, b: MeanFieldGaussian) -> MeanFieldGaussian:
    _check_dims(a, b)
    return MeanFieldGaussian(a.eta + b.eta, a.lam + b.lam)


def quotient(a: MeanFieldGaussian, b: MeanFieldGaussian) -> MeanFieldGaussian:
    _check_dims(a, b)
    return MeanFieldGaussian(a.eta - b.eta, a.lam - b.lam)


def power(a: MeanFieldGaussian, c: float) -> MeanFieldGaussian:
    return MeanFieldGaussian(c * a.eta, c * a.lam)


def _require_proper(a: MeanFieldGaussian) -> None:
    if not a.is_proper:
        bad = np.flatnonzero(a.lam <= 0)
        raise NotProperError(f"precision must be > 0; offending coordinates {bad[:5].tolist()}")


def to_moments(a: MeanFieldGaussian) -> MomentsView:
    _require_proper(a)
    return MomentsView(a.eta / a.lam, 1.0 / a.lam)


def from_moments(m: MomentsView) -> MeanFieldGaussian:
    return MeanFieldGaussian(m.mu / m.var, 1.0 / m.var)


def mode(a: MeanFieldGaussian) -> np.ndarray:
    _require_proper(a)
    return a.eta / a.lam


def sample(a: MeanFieldGaussian, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mu + sigma * z``; ``size`` adds a leading batch axis."""
    m = to_moments(a)
    shape = (m.mu.size,) if size is None else (size, m.mu.size)
    return m.mu + np.sqrt(m.var) * rng.standard_normal(shape)


def log_density(a: MeanFieldGaussian, x: np.ndarray) -> np.ndarray:
    """Normalized log-density at ``x`` (shape ``(d,)`` or ``(n, d)``)."""
    m = to_moments(a)
    x = np.asarray(x, dtype=float)
    z = (x - m.mu) ** 2 / m.var
    return -0.5 * np.sum(z + np.log(2 * np.pi * m.var), axis=-1)

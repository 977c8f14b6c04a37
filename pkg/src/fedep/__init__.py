"""Federated learning as variational inference over mean-field Gaussians."""

from .gaussian import (
    DimensionError,
    GaussianDelta,
    MeanFieldGaussian,
    MomentsView,
    NotProperError,
    from_moments,
    improper_uniform,
    log_density,
    mode,
    power,
    product,
    quotient,
    sample,
    to_moments,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "GaussianDelta",
    "MeanFieldGaussian",
    "MomentsView",
    "NotProperError",
    "from_moments",
    "improper_uniform",
    "log_density",
    "mode",
    "power",
    "product",
    "quotient",
    "sample",
    "to_moments",
]

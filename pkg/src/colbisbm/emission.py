"""Emission kernels for Bernoulli and Poisson valued interactions."""
from __future__ import annotations

from enum import Enum

import numpy as np
from scipy.special import gammaln

EPS_CLAMP = 1e-6


class EmissionKind(str, Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"

    @classmethod
    def parse(cls, value: "str | EmissionKind") -> "EmissionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown emission {value!r}") from None


def log_density(kind: EmissionKind, x, alpha):
    """Log of the emission density f(x; alpha).

    Works on scalars or broadcastable arrays. Raises ``ValueError`` when
    ``alpha`` lies outside the open domain of ``kind`` or when ``x`` is not
    a valid observation.
    """
    kind = EmissionKind.parse(kind)
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise ValueError("observations must be nonnegative integers")
    if kind is EmissionKind.BERNOULLI:
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("Bernoulli parameter must lie in (0, 1)")
        if np.any(x > 1):
            raise ValueError("Bernoulli observations must be 0 or 1")
        out = x * np.log(alpha) + (1 - x) * np.log1p(-alpha)
    else:
        if np.any(alpha <= 0):
            raise ValueError("Poisson parameter must be positive")
        out = -alpha + x * np.log(alpha) - gammaln(x + 1)
    return out[()] if out.ndim == 0 else out


def clamp_alpha(kind: EmissionKind, alpha_raw):
    """Push raw M-step ratios back inside the emission's open domain."""
    kind = EmissionKind.parse(kind)
    a = np.asarray(alpha_raw, dtype=float)
    if kind is EmissionKind.BERNOULLI:
        out = np.clip(a, EPS_CLAMP, 1 - EPS_CLAMP)
    else:
        out = np.maximum(a, EPS_CLAMP)
    return out[()] if out.ndim == 0 else out


def linear_terms(kind: EmissionKind, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split log f(x; alpha) into ``x * slope + intercept`` (up to a term in x only).

    Bernoulli: slope = logit(alpha), intercept = log(1 - alpha).
    Poisson: slope = log(alpha), intercept = -alpha; the -log(x!) part does
    not depend on the parameters and is handled separately.
    """
    if kind is EmissionKind.BERNOULLI:
        log1m = np.log1p(-alpha)
        return np.log(alpha) - log1m, log1m
    return np.log(alpha), -alpha


def log_factorial_sum(values: np.ndarray, observed: np.ndarray) -> float:
    """Sum of log(x!) over observed entries (zero for binary data)."""
    v = values[observed]
    if v.size == 0 or v.max() <= 1:
        return 0.0
    return float(gammaln(v + 1.0).sum())


def neutral_alpha(kind: EmissionKind, observed_mean: float) -> float:
    """Value used for block pairs that carry no variational mass."""
    if kind is EmissionKind.BERNOULLI:
        return 0.5
    return float(clamp_alpha(kind, observed_mean))

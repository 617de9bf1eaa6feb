"""Sub-Weibull(theta, K) sampling, tail bounds and theory constants.

All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SubWeibullParams:
    """Tail index ``theta`` (>= 1/2) and scale ``K`` (> 0).

    ``theta = 0.5`` is the sub-Gaussian boundary, ``theta = 1`` sub-exponential,
    larger values give heavier tails.
    """

    theta: float
    scale: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and self.theta >= 0.5):
            raise ValueError(f"theta must be >= 0.5, got {self.theta}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be > 0, got {self.scale}")


def tail_rate(params: SubWeibullParams, t):
    """Rate function I(t) = (t/K)^(1/theta); P(|X| > t) = exp(-I(t))."""
    t = np.asarray(t, dtype=float)
    return (t / params.scale) ** (1.0 / params.theta)


def _magnitudes(params, u):
    # u in (0, 1]  ->  K * (-ln u)^theta
    e = -np.log(u)
    if params.theta == 1.0:
        return params.scale * e
    if params.theta == 2.0:
        return params.scale * (e * e)
    return params.scale * e**params.theta


def sample(params: SubWeibullParams, rng: np.random.Generator) -> float:
    """One symmetric draw with P(|X| > t) = exp(-(t/K)^(1/theta)).

    Magnitude by inverse CDF, sign from an independent uniform.
    """
    u = 1.0 - rng.random()
    s = rng.random()
    mag = float(_magnitudes(params, u))
    return -mag if s < 0.5 else mag


def sample_vector(params: SubWeibullParams, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``dim`` independent draws of :func:`sample` (same stream consumption order)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    u = 1.0 - rng.random(dim)
    s = rng.random(dim)
    mag = _magnitudes(params, u)
    return np.where(s < 0.5, -mag, mag)


def sample_matrix(params: SubWeibullParams, shape, rng: np.random.Generator) -> np.ndarray:
    """Bulk draws in an arbitrary shape; used for subspaces and Monte-Carlo."""
    u = 1.0 - rng.random(shape)
    s = rng.random(shape)
    mag = _magnitudes(params, u)
    return np.where(s < 0.5, -mag, mag)


def tail_bound(params: SubWeibullParams, t: float) -> float:
    """2 exp(-(t/K)^(1/theta)) clamped to [0, 1]."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return float(min(1.0, 2.0 * math.exp(-float(tail_rate(params, t)))))


def quantile_bound(params: SubWeibullParams, delta: float) -> float:
    """Magnitude exceeded with probability at most ``delta``: K ln(2/delta)^theta."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return params.scale * math.log(2.0 / delta) ** params.theta


def a_constant(theta: float) -> float:
    """Piecewise moment constant ``a(theta)`` of the DC-DPSGD convergence bound."""
    if theta < 0.5:
        raise ValueError(f"theta must be >= 0.5, got {theta}")
    if theta == 0.5:
        return 2.0
    if theta <= 1.0:
        return (4.0 * theta) ** (2.0 * theta) * math.e**2
    return (2.0 ** (2 * theta + 1) + 2.0) * math.gamma(2 * theta + 1) + (
        2.0 ** (3 * theta) * math.gamma(3 * theta + 1) / 3.0
    )


def second_moment_bound(params: SubWeibullParams) -> float:
    """E[X^2] <= 2 Gamma(2 theta + 1) K^2."""
    return 2.0 * math.gamma(2 * params.theta + 1) * params.scale**2

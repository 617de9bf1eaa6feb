"""Per-sample clipping: Abadi, Auto-S normalization and the two-threshold step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dcdpsgd.grad_engine import GradientBatch
from dcdpsgd.subspace_id import TraceRecord
from dcdpsgd.tail_dist import a_constant

CLIP_MODES = ("abadi", "auto_s", "discriminative")
NOISE_MODES = ("per_sample", "batch")
AUTO_S_GAMMA = 0.01


@dataclass(frozen=True)
class ClippingConfig:
    mode: str = "abadi"
    c2: float = 1.0  # body threshold; the only threshold outside discriminative mode
    c1: float = 1.0  # tail threshold
    p: float = 0.0
    gamma: float = AUTO_S_GAMMA

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ValueError(f"unknown clipping mode {self.mode!r}")
        if not self.c2 > 0:
            raise ValueError("c2 must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.mode == "discriminative" and not self.c1 >= self.c2:
            raise ValueError("discriminative mode needs c1 >= c2 > 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def c(self) -> float:
        return self.c2


def clip_factors(norms, c: float) -> np.ndarray:
    """1 / max(1, ||g|| / c), elementwise."""
    norms = np.asarray(norms, dtype=float)
    if math.isinf(c):
        return np.ones_like(norms)
    return 1.0 / np.maximum(1.0, norms / c)


def abadi_clip(g, c: float) -> np.ndarray:
    if not c > 0:
        raise ValueError("c must be positive")
    g = np.asarray(g, dtype=float)
    return g * float(clip_factors(np.linalg.norm(g), c))


def auto_s_factors(norms, c: float, gamma: float = AUTO_S_GAMMA) -> np.ndarray:
    return c / (np.asarray(norms, dtype=float) + gamma)


def auto_s_normalize(g, c: float, gamma: float = AUTO_S_GAMMA) -> np.ndarray:
    """c g / (||g|| + gamma)."""
    if not (c > 0 and gamma > 0):
        raise ValueError("c and gamma must be positive")
    g = np.asarray(g, dtype=float)
    return g * float(auto_s_factors(np.linalg.norm(g), c, gamma))


def clip_batch(batch: GradientBatch, cfg: ClippingConfig) -> np.ndarray:
    """Clip every row with the single threshold ``cfg.c`` (abadi or auto_s)."""
    if cfg.mode == "auto_s":
        f = auto_s_factors(batch.norms, cfg.c, cfg.gamma)
    else:
        f = clip_factors(batch.norms, cfg.c)
    return batch.per_sample * f[:, None]


def clip_loss_fraction(norms, c: float) -> float:
    """sum (||g|| - c)_+ / sum ||g||; 0 for an empty or all-zero population."""
    norms = np.asarray(norms, dtype=float)
    total = float(norms.sum())
    if total == 0.0 or math.isinf(c):
        return 0.0
    return float(np.maximum(norms - c, 0.0).sum()) / total


def discriminative_step(
    batch: GradientBatch,
    record: TraceRecord,
    cfg: ClippingConfig,
    sigma_dp: float,
    rng: np.random.Generator,
    noise_mode: str = "per_sample",
) -> np.ndarray:
    """Clip the tail at c1 and the body at c2, add Gaussian noise, average over B.

    ``per_sample`` draws N(0, c^2 sigma_dp^2 I) once per sample with its own
    threshold. ``batch`` draws once for the whole sum with std
    ``sigma_dp * max threshold in use`` (the sensitivity of the sum).
    """
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {noise_mode!r}")
    B = batch.size
    if record.size != B or record.tail_indices.size + record.body_indices.size != B:
        raise ValueError(f"partition covers {record.size} samples, batch has {B}")
    tail, body = record.tail_indices, record.body_indices
    G, norms = batch.per_sample, batch.norms
    tail_clipped = G[tail] * clip_factors(norms[tail], cfg.c1)[:, None]
    body_clipped = G[body] * clip_factors(norms[body], cfg.c2)[:, None]
    if sigma_dp > 0 and noise_mode == "per_sample":
        d = batch.dim
        tail_clipped = tail_clipped + cfg.c1 * sigma_dp * rng.standard_normal((tail.size, d))
        body_clipped = body_clipped + cfg.c2 * sigma_dp * rng.standard_normal((body.size, d))
    total = tail_clipped.sum(axis=0) + body_clipped.sum(axis=0)
    if sigma_dp > 0 and noise_mode == "batch":
        c_max = cfg.c1 if tail.size else cfg.c2
        total = total + c_max * sigma_dp * rng.standard_normal(batch.dim)
    return total / B


def noise_variance_per_coordinate(cfg: ClippingConfig, sigma_dp: float, batch_size: int,
                                  noise_mode: str, tail_size: int = None) -> float:
    """Variance of the injected noise in one coordinate of the averaged gradient."""
    B = batch_size
    if cfg.mode != "discriminative":
        return (cfg.c * sigma_dp) ** 2 / B**2
    m = tail_size if tail_size is not None else int(math.floor(cfg.p * B + 0.5))
    if noise_mode == "batch":
        c = cfg.c1 if m else cfg.c2
        return (c * sigma_dp) ** 2 / B**2
    return sigma_dp**2 * (m * cfg.c1**2 + (B - m) * cfg.c2**2) / B**2


def threshold_guidance(theta: float, delta: float, c2: float) -> float:
    """Tail threshold c1 = c2 * log10(1/delta)^(theta - 1/2).

    Base-10 logs: at theta = 2, delta = 1e-5 this gives the 5^(3/2) = sqrt(125) ratio.
    """
    if theta < 0.5:
        raise ValueError("theta must be >= 0.5")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return c2 * math.log10(1.0 / delta) ** (theta - 0.5)


def theoretical_c(theta: float, K: float, T: float, delta: float, regime: str,
                  sigma_dp: float = None) -> float:
    """Clipping threshold from the convergence analysis (natural logs).

    body: max(2 sqrt(2a) K ln^(1/2) sqrt(T), 33 sqrt(2a) K ln^(1/2)(2/delta))
    tail: max(4^theta 2 K ln^theta sqrt(T), 4^theta 33 K ln^theta(2/delta))

    Passing ``sigma_dp`` enables the noise-dominated sub-case: when
    16 sqrt(2a) K ln^(1/2)(2/delta) <= 12 sqrt(e) sigma_dp ln^(1/2)(1/delta)
    (body, or tail at theta = 1/2) the second term becomes
    27 sqrt(e) sigma_dp ln^(1/2)(1/delta).
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if regime not in ("body", "tail"):
        raise ValueError(f"unknown regime {regime!r}")
    a = a_constant(theta)
    log_t = math.log(math.sqrt(T))
    log_d = math.log(2.0 / delta)
    if regime == "body":
        first = 2.0 * math.sqrt(2 * a) * K * math.sqrt(log_t)
        second = 33.0 * math.sqrt(2 * a) * K * math.sqrt(log_d)
    else:
        first = 4.0**theta * 2.0 * K * log_t**theta
        second = 4.0**theta * 33.0 * K * log_d**theta
    if sigma_dp is not None and (regime == "body" or theta == 0.5):
        noise_term = 12.0 * math.sqrt(math.e) * sigma_dp * math.sqrt(math.log(1.0 / delta))
        if 16.0 * math.sqrt(2 * a) * K * math.sqrt(log_d) <= noise_term:
            second = 27.0 * math.sqrt(math.e) * sigma_dp * math.sqrt(math.log(1.0 / delta))
    return max(first, second)

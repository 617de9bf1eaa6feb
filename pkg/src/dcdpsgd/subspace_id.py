"""Heavy-tailed random subspaces and trace-based body/tail identification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from dcdpsgd.tail_dist import SubWeibullParams, a_constant, sample_matrix

ORTHO_TOL = 1e-10
UNIT_TOL = 1e-9
MAX_REDRAWS = 3


class RankDeficiencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProjectionSubspace:
    basis: np.ndarray  # d x k, orthonormal columns
    source: Optional[SubWeibullParams] = None
    seed: Optional[int] = None

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.basis.T @ self.basis - np.eye(self.k))))


def _householder(raw, rank_tol):
    Q, R = np.linalg.qr(raw, mode="reduced")
    diag = np.diag(R)
    scale = np.linalg.norm(raw, axis=0)
    if np.any(np.abs(diag) <= rank_tol * np.maximum(scale, 1e-300)):
        raise RankDeficiencyError("drawn vectors are linearly dependent")
    return Q * np.sign(diag)


def _cholesky_qr2(raw):
    # two Cholesky-QR passes; the second removes the loss of orthogonality of the first
    Q = raw
    for _ in range(2):
        R = np.linalg.cholesky(Q.T @ Q).T
        Q = solve_triangular(R, Q.T, trans="T", lower=False).T
    return Q


def orthonormalize(raw: np.ndarray, rank_tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis equal to Gram-Schmidt on the columns of ``raw`` in order.

    Uses Cholesky-QR twice (fast for tall d x k blocks) and falls back to
    Householder QR with diag(R) > 0 when the Gram matrix is ill-conditioned.
    Raises :class:`RankDeficiencyError` if a column is (nearly) dependent.
    """
    raw = np.asarray(raw, dtype=float)
    scale = np.linalg.norm(raw, axis=0)
    if np.any(scale == 0):
        raise RankDeficiencyError("zero column")
    try:
        Q = _cholesky_qr2(raw / scale)
    except np.linalg.LinAlgError:
        Q = None
    if Q is not None and np.all(np.isfinite(Q)):
        if np.max(np.abs(Q.T @ Q - np.eye(Q.shape[1]))) <= ORTHO_TOL:
            return Q
    return _householder(raw, rank_tol)


def build_subspace(
    d: int,
    k: int,
    source: SubWeibullParams,
    rng: np.random.Generator,
    seed: Optional[int] = None,
) -> ProjectionSubspace:
    """k orthonormal directions from sub-Weibull draws in R^d."""
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    for _ in range(MAX_REDRAWS + 1):
        raw = sample_matrix(source, (d, k), rng)
        try:
            return ProjectionSubspace(orthonormalize(raw), source, seed)
        except RankDeficiencyError:
            continue
    raise RankDeficiencyError(f"rank-deficient draws after {MAX_REDRAWS} redraws")


def trace_score(space: ProjectionSubspace, normalized_grad) -> float:
    """tr(V^T g g^T V) = ||V^T g||^2 for a unit (or zero) vector g."""
    g = np.asarray(normalized_grad, dtype=float)
    n = float(np.linalg.norm(g))
    if n != 0.0 and abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"expected a unit or zero vector, got norm {n}")
    p = space.basis.T @ g
    return float(p @ p)


def trace_scores(space: ProjectionSubspace, normalized: np.ndarray) -> np.ndarray:
    """Row-wise :func:`trace_score` for a B x d matrix of normalized gradients."""
    P = normalized @ space.basis
    return np.einsum("ij,ij->i", P, P)


@dataclass(frozen=True)
class TraceRecord:
    raw: np.ndarray
    noisy: np.ndarray
    sigma_tr: float
    tail_indices: np.ndarray
    body_indices: np.ndarray

    @property
    def size(self) -> int:
        return self.raw.shape[0]


def tail_count(p: float, batch_size: int) -> int:
    return int(math.floor(p * batch_size + 0.5))


def perturb_and_partition(traces, sigma_tr: float, p: float, rng: np.random.Generator) -> TraceRecord:
    """Add N(0, sigma_tr^2) to each trace (sensitivity 1) and take the top-p as tail.

    Ties go to the lower index. Both index arrays are returned in ascending order.
    """
    raw = np.asarray(traces, dtype=float)
    if sigma_tr < 0:
        raise ValueError("sigma_tr must be nonnegative")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if raw.size and (raw.min() < -UNIT_TOL or raw.max() > 1 + UNIT_TOL):
        raise ValueError("traces must lie in [0, 1]")
    noisy = raw + sigma_tr * rng.standard_normal(raw.shape) if sigma_tr > 0 else raw.copy()
    m = tail_count(p, raw.size)
    # stable sort on -noisy keeps ascending index among equal values
    order = np.argsort(-noisy, kind="stable")
    tail = np.sort(order[:m])
    body = np.sort(order[m:])
    return TraceRecord(raw, noisy, float(sigma_tr), tail, body)


def trace_error_bound(k: int, d: int, delta_m: float, sigma_tr: float, delta: float) -> float:
    """4 ln(2d/delta_m)/k + sigma_tr ln(2/delta)^(1/2)."""
    if k < 1 or d < 1:
        raise ValueError("k and d must be >= 1")
    for name, v in (("delta_m", delta_m), ("delta", delta)):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    if sigma_tr < 0:
        raise ValueError("sigma_tr must be nonnegative")
    return 4.0 * math.log(2.0 * d / delta_m) / k + sigma_tr * math.sqrt(math.log(2.0 / delta))


def lambda_max_diagnostic(params: SubWeibullParams, mu: float = 0.5) -> float:
    """Fixed point of t = mu * a * K^2 * I(t) / t, reported for diagnostics only.

    With I(t) = (t/K)^(1/theta) this is t = K (mu a)^(theta / (2 theta - 1)).
    At theta = 1/2 every t solves it when mu * a = 1, so NaN is returned.
    """
    theta = params.theta
    if theta == 0.5:
        return math.nan
    return params.scale * (mu * a_constant(theta)) ** (theta / (2.0 * theta - 1.0))

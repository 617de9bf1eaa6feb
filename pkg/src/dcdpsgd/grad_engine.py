"""Small models with exact per-sample gradients, and a synthetic quadratic objective.

Supported model kinds:

* ``linear``   squared loss 1/2 (w.x + b - y)^2
* ``logistic`` binary sigmoid cross-entropy when ``n_classes == 2`` (labels 0/1),
  multinomial softmax cross-entropy otherwise
* ``mlp``      one tanh hidden layer followed by a softmax (or sigmoid) head

Parameters are held as one flat vector; :class:`ModelDims` knows the layout.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from dcdpsgd.tail_dist import SubWeibullParams, sample, sample_matrix

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NORM_EPS = 1e-12

MODEL_KINDS = ("linear", "logistic", "mlp")


class GradientError(FloatingPointError):
    """Non-finite loss or gradient for a specific sample."""

    def __init__(self, index: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at sample index {index}")
        self.index = index


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0  # 0 for regression targets
    class_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty n x f matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        labels = np.asarray(self.labels)
        if labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per feature row")
        if self.n_classes:
            labels = labels.astype(np.int64)
            if labels.min() < 0 or labels.max() >= self.n_classes:
                raise ValueError(f"labels outside [0, {self.n_classes})")
            if self.class_counts is None:
                self.class_counts = np.bincount(labels, minlength=self.n_classes)
        else:
            labels = labels.astype(float)
        self.labels = labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ModelDims:
    kind: str
    n_features: int
    n_outputs: int = 1  # 1 for linear / binary heads, C for softmax heads
    hidden: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")

    @property
    def size(self) -> int:
        b = 1 if self.bias else 0
        if self.kind == "mlp":
            return self.hidden * (self.n_features + b) + self.n_outputs * (self.hidden + b)
        return self.n_outputs * (self.n_features + b)


def dims_for(kind: str, data: Dataset, hidden: int = 0, bias: bool = True) -> ModelDims:
    if kind == "linear":
        outputs = 1
    elif data.n_classes == 2:
        outputs = 1
    else:
        outputs = data.n_classes
    return ModelDims(kind, data.n_features, outputs, hidden, bias)


@dataclass
class Model:
    dims: ModelDims
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.dims.size,):
            raise ValueError(f"expected {self.dims.size} weights, got {self.weights.shape}")

    @property
    def kind(self) -> str:
        return self.dims.kind

    @property
    def d(self) -> int:
        return self.dims.size

    def with_weights(self, w) -> "Model":
        return Model(self.dims, w)


def init_model(dims: ModelDims, rng: Optional[np.random.Generator] = None) -> Model:
    """Zeros for the convex models, uniform(+-1/sqrt(fan_in)) for the MLP."""
    if dims.kind != "mlp":
        return Model(dims, np.zeros(dims.size))
    if rng is None:
        raise ValueError("mlp initialization needs an rng")
    b = 1 if dims.bias else 0
    s1 = 1.0 / math.sqrt(dims.n_features)
    s2 = 1.0 / math.sqrt(dims.hidden)
    w1 = rng.uniform(-s1, s1, dims.hidden * (dims.n_features + b))
    w2 = rng.uniform(-s2, s2, dims.n_outputs * (dims.hidden + b))
    return Model(dims, np.concatenate([w1, w2]))


def _affine_split(flat, n_out, n_in, bias):
    W = flat[: n_out * n_in].reshape(n_out, n_in)
    b = flat[n_out * n_in : n_out * (n_in + 1)] if bias else None
    return W, b


def _unpack(model: Model):
    dims = model.dims
    w = model.weights
    if dims.kind != "mlp":
        return _affine_split(w, dims.n_outputs, dims.n_features, dims.bias)
    b = 1 if dims.bias else 0
    cut = dims.hidden * (dims.n_features + b)
    W1, b1 = _affine_split(w[:cut], dims.hidden, dims.n_features, dims.bias)
    W2, b2 = _affine_split(w[cut:], dims.n_outputs, dims.hidden, dims.bias)
    return W1, b1, W2, b2


def _affine(X, W, b):
    z = X @ W.T
    return z if b is None else z + b


def _head(z, y, dims: ModelDims):
    """Per-sample loss and dloss/dz for the output layer."""
    if dims.kind == "linear":
        r = z[:, 0] - y
        return 0.5 * r**2, r[:, None]
    if dims.n_outputs == 1:
        zz = z[:, 0]
        loss = np.logaddexp(0.0, zz) - y * zz
        p = 0.5 * (1.0 + np.tanh(0.5 * zz))
        return loss, (p - y)[:, None]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    yi = y.astype(np.int64)
    loss = lse - z[np.arange(len(yi)), yi]
    P = np.exp(z - lse[:, None])
    P[np.arange(len(yi)), yi] -= 1.0
    return loss, P


def _layer_grads(dz, A, bias):
    # per-sample outer products, flattened in (W, b) order
    gW = (dz[:, :, None] * A[:, None, :]).reshape(len(dz), -1)
    return np.concatenate([gW, dz], axis=1) if bias else gW


def forward(model: Model, X: np.ndarray, y: np.ndarray):
    """Output logits and the hidden activations (None for single-layer models)."""
    dims = model.dims
    if dims.kind != "mlp":
        W, b = _unpack(model)
        z = _affine(X, W, b)
        return z, None
    W1, b1, W2, b2 = _unpack(model)
    h = np.tanh(_affine(X, W1, b1))
    return _affine(h, W2, b2), h


def per_sample_losses(model: Model, X, y) -> np.ndarray:
    z, _ = forward(model, X, y)
    loss, _ = _head(z, y, model.dims)
    return loss


def _per_sample_grad_matrix(model: Model, X, y, index=None):
    dims = model.dims
    z, h = forward(model, X, y)
    loss, dz = _head(z, y, dims)
    bad = np.flatnonzero(~np.isfinite(loss))
    if bad.size:
        raise GradientError(_origin(index, bad[0]))
    if dims.kind != "mlp":
        G = _layer_grads(dz, X, dims.bias)
    else:
        _, _, W2, _ = _unpack(model)
        g2 = _layer_grads(dz, h, dims.bias)
        dh = (dz @ W2) * (1.0 - h**2)
        g1 = _layer_grads(dh, X, dims.bias)
        G = np.concatenate([g1, g2], axis=1)
    bad = np.flatnonzero(~np.all(np.isfinite(G), axis=1))
    if bad.size:
        raise GradientError(_origin(index, bad[0]), "non-finite gradient")
    return G, loss


def _origin(index, pos):
    return int(pos) if index is None else int(index[pos])


@dataclass
class GradientBatch:
    per_sample: np.ndarray
    norms: np.ndarray = field(init=False)
    normalized: np.ndarray = field(init=False)
    zero_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.per_sample = np.asarray(self.per_sample, dtype=float)
        self.norms = np.linalg.norm(self.per_sample, axis=1)
        self.zero_mask = self.norms <= NORM_EPS
        safe = np.where(self.zero_mask, 1.0, self.norms)
        self.normalized = self.per_sample / safe[:, None]
        self.normalized[self.zero_mask] = 0.0

    @property
    def size(self) -> int:
        return self.per_sample.shape[0]

    @property
    def dim(self) -> int:
        return self.per_sample.shape[1]


def per_sample_gradients(model: Model, batch, data: Dataset) -> GradientBatch:
    """Exact per-sample gradients of the per-sample loss at ``model.weights``."""
    idx = np.asarray(batch, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= data.n):
        raise IndexError("batch index out of range")
    if not np.all(np.isfinite(model.weights)):
        raise ValueError("model weights are not finite")
    G, _ = _per_sample_grad_matrix(model, data.features[idx], data.labels[idx], idx)
    return GradientBatch(G)


def full_pass(model: Model, data: Dataset, chunk: int = 4096):
    """Mean loss, accuracy (None for regression) and exact mean gradient over ``data``.

    The mean gradient is formed without materializing per-sample gradients.
    """
    dims = model.dims
    total_loss = 0.0
    correct = 0
    grad = np.zeros(dims.size)
    for start in range(0, data.n, chunk):
        X = data.features[start : start + chunk]
        y = data.labels[start : start + chunk]
        z, h = forward(model, X, y)
        loss, dz = _head(z, y, dims)
        total_loss += float(loss.sum())
        if dims.kind == "mlp":
            _, _, W2, _ = _unpack(model)
            dh = (dz @ W2) * (1.0 - h**2)
            parts = [dh.T @ X]
            if dims.bias:
                parts.append(dh.sum(axis=0))
            parts.append(dz.T @ h)
            if dims.bias:
                parts.append(dz.sum(axis=0))
        else:
            parts = [dz.T @ X]
            if dims.bias:
                parts.append(dz.sum(axis=0))
        grad += np.concatenate([p.ravel() for p in parts])
        if data.n_classes:
            correct += int(np.sum(_predict_from_logits(z, dims) == y))
    accuracy = correct / data.n if data.n_classes else None
    return total_loss / data.n, accuracy, grad / data.n


def _predict_from_logits(z, dims):
    if dims.n_outputs == 1:
        return (z[:, 0] > 0).astype(np.int64)
    return np.argmax(z, axis=1)


def predict(model: Model, X) -> np.ndarray:
    z, _ = forward(model, np.asarray(X, dtype=float), None)
    return _predict_from_logits(z, model.dims)


# -- synthetic objective ----------------------------------------------------


@dataclass
class SyntheticObjective:
    """Quadratic L(w) = curvature/2 ||w - w*||^2 with sub-Weibull gradient noise.

    ``noise=None`` gives exact gradients (the K = 0 degenerate case).
    """

    true_minimizer: np.ndarray
    curvature: float = 1.0
    noise: Optional[SubWeibullParams] = None
    grad_norm_cap: float = math.inf
    check_cap: bool = False

    def __post_init__(self):
        self.true_minimizer = np.asarray(self.true_minimizer, dtype=float)
        if self.curvature <= 0:
            raise ValueError("curvature must be positive")
        if self.grad_norm_cap <= 0:
            raise ValueError("grad_norm_cap must be positive")

    @property
    def d(self) -> int:
        return self.true_minimizer.shape[0]

    def true_gradient(self, w) -> np.ndarray:
        g = self.curvature * (np.asarray(w, dtype=float) - self.true_minimizer)
        if self.check_cap:
            assert float(g @ g) <= self.grad_norm_cap, "||grad L||^2 exceeds G"
        return g

    def loss(self, w) -> float:
        r = np.asarray(w, dtype=float) - self.true_minimizer
        return 0.5 * self.curvature * float(r @ r)

    def noise_batch(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """``size`` noise vectors r*u, r ~ |subW|, u uniform on the sphere."""
        if self.noise is None:
            return np.zeros((size, self.d))
        r = np.abs(sample_matrix(self.noise, size, rng))
        u = rng.standard_normal((size, self.d))
        return (r / np.linalg.norm(u, axis=1))[:, None] * u


def _noise_vector(params, d, rng):
    r = abs(sample(params, rng))
    u = rng.standard_normal(d)
    nu = np.linalg.norm(u)
    return r * u / nu


def synthetic_gradient(obj: SyntheticObjective, w, rng: np.random.Generator):
    """(noisy_grad, true_grad); the noise norm is an exact |sub-Weibull| draw."""
    true = obj.true_gradient(w)
    if obj.noise is None:
        return true.copy(), true
    return true + _noise_vector(obj.noise, obj.d, rng), true


def synthetic_batch(obj: SyntheticObjective, w, size: int, rng) -> GradientBatch:
    true = obj.true_gradient(w)
    return GradientBatch(true[None, :] + obj.noise_batch(size, rng))


# -- datasets ---------------------------------------------------------------


def imbalanced_counts(n_classes: int, max_count: int, decay: float) -> list:
    # round-half-up on the exponential profile
    return [int(math.floor(max_count * decay**c + 0.5)) for c in range(n_classes)]


def make_imbalanced_dataset(
    n_classes: int, max_count: int, decay: float, feature_dim: int, rng: np.random.Generator
) -> Dataset:
    """Class ``c`` gets round(max_count * decay**c) Gaussian samples around a unit mean."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if max_count < n_classes:
        raise ValueError("max_count must be >= n_classes")
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must lie in (0, 1]")
    counts = imbalanced_counts(n_classes, max_count, decay)
    if min(counts) < 1:
        raise ValueError(f"a class received no samples: {counts}")
    means = np.zeros((n_classes, feature_dim))
    for c in range(n_classes):
        means[c, c % feature_dim] = 1.0 + c // feature_dim
    X = np.concatenate([means[c] + rng.standard_normal((m, feature_dim)) for c, m in enumerate(counts)])
    y = np.concatenate([np.full(m, c) for c, m in enumerate(counts)])
    return Dataset(X, y, n_classes, np.asarray(counts))


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX tensor (optionally gzipped)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: missing header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, expected {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


def dataset_from_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(X, labels.astype(np.int64), 10)

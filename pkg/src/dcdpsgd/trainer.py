"""DPSGD and DC-DPSGD training loops with per-step trace records."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from dcdpsgd import clipping as clip
from dcdpsgd.grad_engine import (
    Dataset,
    GradientBatch,
    Model,
    ModelDims,
    SyntheticObjective,
    full_pass,
    init_model,
    per_sample_gradients,
    synthetic_batch,
)
from dcdpsgd.privacy import NoiseScales
from dcdpsgd.rng import stream
from dcdpsgd.subspace_id import build_subspace, perturb_and_partition, tail_count, trace_scores
from dcdpsgd.tail_dist import SubWeibullParams

TRACE_COLUMNS = [
    "step",
    "metric",
    "grad_norm_p50",
    "grad_norm_p95",
    "clip_loss_body",
    "clip_loss_tail",
    "tail_count",
    "loss",
    "accuracy",
]


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite weights after step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class SyntheticTarget:
    """Quadratic objective; ``n`` is the notional dataset size used for q = B/n."""

    objective: SyntheticObjective
    n: int
    w0: Optional[np.ndarray] = None


@dataclass
class DataTarget:
    dims: ModelDims
    data: Dataset
    test: Optional[Dataset] = None

    @property
    def n(self) -> int:
        return self.data.n


Target = Union[SyntheticTarget, DataTarget]


@dataclass
class TrainConfig:
    target: Target
    steps: int
    batch_size: int
    lr: float
    clipping: clip.ClippingConfig
    noise: NoiseScales
    subspace_k: int = 200
    subspace_source: SubWeibullParams = field(default_factory=lambda: SubWeibullParams(2.0, 1.0))
    seed: int = 0
    lr_schedule: str = "constant"  # or "inv_sqrt_T": lr / sqrt(T)
    noise_mode: str = "per_sample"  # DC-DPSGD only; DPSGD always adds one batch draw
    sampling: str = "uniform"  # or "poisson"
    epochs: int = 1  # reporting grouping only

    def __post_init__(self):
        n = self.target.n
        if not 1 <= self.batch_size <= n:
            raise ValueError(f"batch size {self.batch_size} must lie in [1, n={n}]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "inv_sqrt_T"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.sampling not in ("uniform", "poisson"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.noise_mode not in clip.NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        # sigmas must come from calibrate() for this exact (q, T)
        if not math.isclose(self.noise.q, self.q, rel_tol=1e-12):
            raise ValueError(f"noise calibrated for q={self.noise.q}, run has q={self.q}")
        if self.noise.T != self.steps:
            raise ValueError(f"noise calibrated for T={self.noise.T}, run has {self.steps} steps")
        cs = (self.clipping.c1, self.clipping.c2)
        if self.noise.sigma_dp > 0 and any(math.isinf(c) for c in cs):
            raise ValueError("infinite clipping threshold with nonzero noise")

    @property
    def q(self) -> float:
        return self.batch_size / self.target.n

    def step_size(self, t: int) -> float:
        if self.lr_schedule == "inv_sqrt_T":
            return self.lr / math.sqrt(self.steps)
        return self.lr


@dataclass
class StepRecord:
    step: int
    metric: float
    grad_norm_p50: float
    grad_norm_p95: float
    clip_loss_body: float
    clip_loss_tail: float
    tail_count: int
    loss: float
    accuracy: Optional[float] = None


@dataclass
class TrainTrace:
    records: List[StepRecord] = field(default_factory=list)
    final_weights: Optional[np.ndarray] = None
    weights_history: Optional[List[np.ndarray]] = None
    tail_hits: int = 0  # tail picks that were also top-p by raw trace
    final_metric: float = math.nan
    final_loss: float = math.nan
    test_accuracy: Optional[float] = None
    final_accuracy: Optional[float] = None

    def to_csv(self, path=None) -> str:
        """One row per step plus a closing row for the final iterate.

        The closing row has step = T and blank batch columns; its accuracy is the
        held-out accuracy when a test split exists, else the training accuracy.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([
                r.step, repr(r.metric), repr(r.grad_norm_p50), repr(r.grad_norm_p95),
                repr(r.clip_loss_body), repr(r.clip_loss_tail), r.tail_count, repr(r.loss),
                _fmt(r.accuracy),
            ])
        if math.isfinite(self.final_metric):
            acc = self.test_accuracy if self.test_accuracy is not None else self.final_accuracy
            w.writerow([len(self.records), repr(self.final_metric), "", "", "", "", "",
                        repr(self.final_loss), _fmt(acc)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_csv_text(cls, text: str) -> "TrainTrace":
        out = cls()
        for r in csv.DictReader(io.StringIO(text)):
            acc = None if r["accuracy"] == "" else float(r["accuracy"])
            if r["grad_norm_p50"] == "":
                out.final_metric, out.final_loss, out.final_accuracy = float(r["metric"]), float(r["loss"]), acc
                continue
            out.records.append(StepRecord(
                int(r["step"]), float(r["metric"]), float(r["grad_norm_p50"]),
                float(r["grad_norm_p95"]), float(r["clip_loss_body"]), float(r["clip_loss_tail"]),
                int(r["tail_count"]), float(r["loss"]), acc,
            ))
        return out

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def convergence_metric(grad_norm: float) -> float:
    return min(grad_norm, grad_norm * grad_norm)


class _Runner:
    """Shared machinery for both loops: streams, batches, metrics, updates."""

    def __init__(self, cfg: TrainConfig, keep_history: bool):
        self.cfg = cfg
        seed = cfg.seed
        self.batch_rng = stream(seed, "batch")
        self.grad_rng = stream(seed, "grad")
        self.subspace_rng = stream(seed, "subspace")
        self.trace_rng = stream(seed, "trace_noise")
        self.dp_rng = stream(seed, "dp_noise")
        target = cfg.target
        if isinstance(target, SyntheticTarget):
            d = target.objective.d
            w0 = np.zeros(d) if target.w0 is None else np.array(target.w0, dtype=float)
            self.model = None
        else:
            self.model = init_model(target.dims, stream(seed, "init"))
            w0 = self.model.weights.copy()
        self.w = w0
        self.history = [w0.copy()] if keep_history else None
        self.trace = TrainTrace()

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def evaluate_iterate(self):
        """(metric, loss, accuracy) at the current (pre-update) iterate."""
        target = self.cfg.target
        if isinstance(target, SyntheticTarget):
            g = target.objective.true_gradient(self.w)
            return convergence_metric(float(np.linalg.norm(g))), target.objective.loss(self.w), None
        loss, acc, g = full_pass(self.model.with_weights(self.w), target.data)
        return convergence_metric(float(np.linalg.norm(g))), loss, acc

    def sample_batch(self) -> GradientBatch:
        cfg = self.cfg
        target = cfg.target
        n = target.n
        if cfg.sampling == "poisson":
            idx = np.flatnonzero(self.batch_rng.random(n) < cfg.q)
            size = idx.size
        else:
            size = cfg.batch_size
            idx = self.batch_rng.choice(n, size=size, replace=False)
        if isinstance(target, SyntheticTarget):
            return synthetic_batch(target.objective, self.w, size, self.grad_rng)
        if size == 0:
            return GradientBatch(np.zeros((0, self.d)))
        return per_sample_gradients(self.model.with_weights(self.w), idx, target.data)

    def update(self, t: int, g: np.ndarray):
        with np.errstate(over="ignore", invalid="ignore"):
            self.w = self.w - self.cfg.step_size(t) * g
        if not np.all(np.isfinite(self.w)):
            raise TrainingDivergedError(t)
        if self.history is not None:
            self.history.append(self.w.copy())

    def record(self, t, metric, loss, acc, norms, body_loss, tail_loss, tail_count):
        if norms.size:
            p50, p95 = np.percentile(norms, [50, 95])
        else:
            p50 = p95 = 0.0
        self.trace.records.append(
            StepRecord(t, float(metric), float(p50), float(p95), float(body_loss), float(tail_loss),
                       int(tail_count), float(loss), None if acc is None else float(acc))
        )

    def finish(self) -> TrainTrace:
        metric, loss, acc = self.evaluate_iterate()
        tr = self.trace
        tr.final_accuracy = None if acc is None else float(acc)
        tr.final_weights = self.w
        tr.weights_history = self.history
        tr.final_metric = float(metric)
        tr.final_loss = float(loss)
        target = self.cfg.target
        if isinstance(target, DataTarget) and target.test is not None:
            tr.test_accuracy, _ = evaluate(self.model.with_weights(self.w), target.test)
        return tr


def run_dpsgd(cfg: TrainConfig, keep_history: bool = False) -> TrainTrace:
    """Clip each per-sample gradient at c, add one N(0, c^2 sigma^2 I) draw to the sum, average."""
    if cfg.clipping.mode not in ("abadi", "auto_s"):
        raise ValueError("run_dpsgd needs clipping mode 'abadi' or 'auto_s'")
    runner = _Runner(cfg, keep_history)
    c = cfg.clipping.c
    sigma = cfg.noise.sigma_dp
    B = cfg.batch_size
    for t in range(cfg.steps):
        metric, loss, acc = runner.evaluate_iterate()
        batch = runner.sample_batch()
        total = clip.clip_batch(batch, cfg.clipping).sum(axis=0)
        if sigma > 0:
            total = total + c * sigma * runner.dp_rng.standard_normal(runner.d)
        g = total / B
        runner.record(t, metric, loss, acc, batch.norms, clip.clip_loss_fraction(batch.norms, c), 0.0, 0)
        runner.update(t, g)
    return runner.finish()


def run_dc_dpsgd(cfg: TrainConfig, keep_history: bool = False) -> TrainTrace:
    """Discriminative clipping with a fresh heavy-tailed subspace every step."""
    cc = cfg.clipping
    if cc.mode != "discriminative":
        raise ValueError("run_dc_dpsgd needs clipping mode 'discriminative'")
    if cfg.subspace_k < 1:
        raise ValueError("subspace_k must be >= 1")
    runner = _Runner(cfg, keep_history)
    d = runner.d
    k = min(cfg.subspace_k, d)
    sigma_tr = cfg.noise.sigma_tr if cfg.noise.trace_stage else 0.0
    for t in range(cfg.steps):
        metric, loss, acc = runner.evaluate_iterate()
        batch = runner.sample_batch()
        if tail_count(cc.p, batch.size):
            space = build_subspace(d, k, cfg.subspace_source, runner.subspace_rng)
            traces = trace_scores(space, batch.normalized)
            traces[batch.zero_mask] = 0.0
            np.clip(traces, 0.0, 1.0, out=traces)
        else:
            # empty tail: the partition is fixed, scoring would not change it
            traces = np.zeros(batch.size)
        record = perturb_and_partition(traces, sigma_tr, cc.p, runner.trace_rng)
        g = clip.discriminative_step(batch, record, cc, cfg.noise.sigma_dp, runner.dp_rng, cfg.noise_mode)
        if cfg.sampling == "poisson" and batch.size:
            g = g * batch.size / cfg.batch_size
        m = record.tail_indices.size
        if m:
            runner.trace.tail_hits += int(np.intersect1d(
                record.tail_indices, np.argsort(-traces, kind="stable")[:m]).size)
        norms = batch.norms
        runner.record(
            t, metric, loss, acc, norms,
            clip.clip_loss_fraction(norms[record.body_indices], cc.c2),
            clip.clip_loss_fraction(norms[record.tail_indices], cc.c1),
            int(m),
        )
        runner.update(t, g)
    return runner.finish()


def run(cfg: TrainConfig, keep_history: bool = False) -> TrainTrace:
    if cfg.clipping.mode == "discriminative":
        return run_dc_dpsgd(cfg, keep_history)
    return run_dpsgd(cfg, keep_history)


def evaluate(model: Model, dataset: Dataset):
    """(accuracy, mean loss) over the full dataset; accuracy is None for regression."""
    if dataset is None or dataset.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if not np.all(np.isfinite(model.weights)):
        raise ValueError("model weights are not finite")
    loss, acc, _ = full_pass(model, dataset)
    return acc, loss

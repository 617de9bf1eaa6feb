"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtime limits are part of the criteria and are asserted too.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from dcdpsgd.clipping import ClippingConfig, threshold_guidance
from dcdpsgd.experiments import bounds, harness
from dcdpsgd.experiments.spec import load_spec
from dcdpsgd.grad_engine import Dataset, Model, ModelDims, SyntheticObjective, per_sample_gradients, per_sample_losses
from dcdpsgd.privacy import NoiseScales
from dcdpsgd.rng import stream
from dcdpsgd.subspace_id import build_subspace, trace_score
from dcdpsgd.tail_dist import SubWeibullParams
from dcdpsgd.trainer import SyntheticTarget, TrainConfig, run_dc_dpsgd, run_dpsgd

SPECS = Path(__file__).resolve().parents[1] / "specs"


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
    return emit


def test_01_sampler_tail_fidelity(report):
    t0 = time.perf_counter()
    results = bounds.sampler_tail_sweep(thetas=(0.5, 1.0, 2.0), scales=(1.0,), n_draws=1_000_000)
    elapsed = time.perf_counter() - t0
    tails = [r for r in results if r.name.startswith("tail bound")]
    ident = [r for r in results if r.name.startswith("P(|X|>K)")]
    ok = len(tails) == 3 and len(ident) == 3 and all(r.passed for r in results)
    ok = ok and all(r.bound == 0.002 for r in ident) and elapsed < 30
    worst = max(r.observed for r in ident)
    report(1, "sampler tail fidelity", ok, f"max |P(|X|>K) - 1/e| = {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_02_trace_error_frequency(report):
    t0 = time.perf_counter()
    results = bounds.trace_error_frequency(d=500, ks=(50, 100, 200), sigmas=(0.0, 0.05), delta_m=0.05,
                                        delta=0.05, trials=500)
    elapsed = time.perf_counter() - t0
    ok = len(results) == 6 and all(r.observed <= 0.10 for r in results) and elapsed < 120
    worst = max(r.observed for r in results)
    report(2, "trace-error violation frequency <= 0.10", ok, f"worst frequency {worst:.3f}, {elapsed:.1f}s")
    assert ok


def test_03_trace_identity(report):
    t0 = time.perf_counter()
    rng = stream(2024, "trace_identity")
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 17))
        k = int(rng.integers(1, d + 1))
        space = build_subspace(d, k, SubWeibullParams(2.0, 1.0), rng)
        g = rng.standard_normal(d)
        g /= np.linalg.norm(g)
        explicit = float(np.trace(space.basis.T @ np.outer(g, g) @ space.basis))
        worst = max(worst, abs(trace_score(space, g) - explicit))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    report(3, "trace score equals explicit trace", ok, f"max error {worst:.1e}, {elapsed:.3f}s")
    assert ok


def test_04_degeneracy_chain(report):
    w_star, beta, lr, c, T, B, n = np.array([3.0, -4.0]), 2.0, 0.2, 0.7, 50, 8, 100
    target = SyntheticTarget(SyntheticObjective(w_star, beta), n=n)
    quiet = NoiseScales(0.0, 0.0, B / n, T, 1.25, trace_stage=False)
    dp = run_dpsgd(TrainConfig(target, T, B, lr, ClippingConfig("abadi", c2=c), quiet), keep_history=True)
    dc = run_dc_dpsgd(TrainConfig(target, T, B, lr, ClippingConfig("discriminative", c2=c, c1=c, p=0.0), quiet,
                                  noise_mode="batch"), keep_history=True)
    w, oracle = np.zeros(2), [np.zeros(2)]
    for _ in range(T):
        g = beta * (w - w_star)
        norm = math.hypot(g[0], g[1])
        w = w - lr * (g * min(1.0, c / norm))
        oracle.append(w)
    a, b = np.array(dp.weights_history), np.array(dc.weights_history)
    identical = np.array_equal(a, b)
    err = float(np.max(np.abs(a - np.array(oracle))))
    ok = identical and err <= 1e-12
    report(4, "degeneracy chain DC == DPSGD == clipped GD", ok, f"bit-identical={identical}, oracle error {err:.1e}")
    assert ok


def _fd(model, x, y, h=1e-5):
    w = model.weights
    out = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        lp = per_sample_losses(model.with_weights(w + e), x[None], np.array([y]))[0]
        lm = per_sample_losses(model.with_weights(w - e), x[None], np.array([y]))[0]
        out[j] = (lp - lm) / (2 * h)
    return out


def test_05_gradient_correctness(report):
    t0 = time.perf_counter()
    kinds = [("linear", 0), ("logistic", 2), ("logistic", 4), ("mlp", 2), ("mlp", 4)]
    worst, count = 0.0, {}
    for kind, classes in kinds:
        rng = stream(5, kind, classes)
        for _ in range(20):
            f = int(rng.integers(2, 6))
            X = rng.normal(size=(3, f))
            if kind == "linear":
                data, dims = Dataset(X, rng.normal(size=3)), ModelDims("linear", f)
            else:
                data = Dataset(X, rng.integers(0, classes, 3), classes)
                dims = ModelDims(kind, f, 1 if classes == 2 else classes, 4 if kind == "mlp" else 0)
            model = Model(dims, rng.normal(scale=0.5, size=dims.size))
            i = int(rng.integers(0, 3))
            analytic = per_sample_gradients(model, [i], data).per_sample[0]
            numeric = _fd(model, data.features[i], data.labels[i])
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
            worst = max(worst, rel)
            count[(kind, classes)] = count.get((kind, classes), 0) + 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and all(v >= 20 for v in count.values()) and elapsed < 10
    report(5, "per-sample gradients match finite differences", ok,
           f"{sum(count.values())} instances, max relative error {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_06_calibration_identities(report):
    results = bounds.calibration_identities(n=100, seed=6)
    tol = {"calibration 2T": 1e-12, "calibration eps/2": 1e-12, "calibration 2q": 1e-12, "calibration split": 1e-15}
    ok = all(r.observed <= tol[r.name] for r in results) and len(results) == 4
    report(6, "calibration homogeneity and split conservation", ok,
           ", ".join(f"{r.name.split()[1]}={r.observed:.1e}" for r in results))
    assert ok


def test_07_threshold_guidance(report):
    ratio = threshold_guidance(2.0, 1e-5, 0.37) / 0.37
    flat = threshold_guidance(0.5, 1e-5, 0.37) / 0.37
    ok = 11.0 <= ratio <= 11.4 and flat == 1.0
    report(7, "tail threshold guidance", ok, f"ratio at theta=2: {ratio:.4f}, at theta=1/2: {flat}")
    assert ok


def _paired(spec, out):
    harness.run_grid(spec, out)
    res = {v: [harness.load_run(out, v, s).final_metric for s in spec.seeds] for v in ("dc", "dpsgd")}
    return np.array(res["dc"]), np.array(res["dpsgd"])


def test_08_direction_of_effect(report, tmp_path):
    t0 = time.perf_counter()
    heavy = load_spec(SPECS / "heavy_tail_compare.ini")
    light = load_spec(SPECS / "light_tail_compare.ini")
    for spec, theta in ((heavy, 2.0), (light, 0.5)):
        for v in spec.variants:
            assert (v.values["theta"], v.values["scale"], v.values["d"], v.values["steps"],
                    v.values["batch_size"], v.eps_total) == (theta, 1.0, 100, 500, 64, 8.0)
        assert spec.seeds == [0, 1, 2, 3, 4]
    dc_h, dp_h = _paired(heavy, tmp_path / "heavy")
    dc_l, dp_l = _paired(light, tmp_path / "light")
    elapsed = time.perf_counter() - t0
    wins = int(np.sum(dc_h < dp_h))
    heavy_ok = dc_h.mean() < dp_h.mean() and wins >= 4
    pooled = math.sqrt((dc_l.var(ddof=1) + dp_l.var(ddof=1)) / 2)
    diff = float(np.mean(dc_l - dp_l))
    light_ok = abs(diff) <= pooled
    ok = heavy_ok and light_ok and elapsed < 300
    report(8, "direction of effect on the synthetic quadratic", ok,
           f"theta=2: DC {dc_h.mean():.4g} vs DPSGD {dp_h.mean():.4g}, {wins}/5 wins; "
           f"theta=1/2: |diff|/pooled std = {abs(diff) / pooled:.2f}; {elapsed:.0f}s")
    assert ok


def test_09_identification_quality(report):
    results = bounds.planted_recall_sweep(ks=(25, 50, 100, 200), seeds=range(20), d=500, batch=1000, p=0.1,
                                          body_trace=0.1, tail_trace=0.9, sigma_tr=0.05)
    means = results[-1].detail["means"]
    ok = all(r.passed for r in results)
    report(9, "planted tail recall >= 0.95, non-decreasing in k", ok,
           "recall " + ", ".join(f"k={k}: {m:.3f}" for k, m in zip((25, 50, 100, 200), means)))
    assert ok


def test_10_k_trend_on_mnist_class_data(report, tmp_path):
    t0 = time.perf_counter()
    spec = load_spec(SPECS / "mnist_k_sweep.ini")
    for v in spec.variants:
        assert (v.values["n_train"], v.eps_total, v.delta, v.values["model"]) == (10000, 8.0, 1e-5, "logistic")
    assert len(spec.seeds) == 3
    harness.run_grid(spec, tmp_path)
    acc = {v.name: np.mean([harness.load_run(tmp_path, v.name, s).accuracy for s in spec.seeds])
           for v in spec.variants}
    elapsed = time.perf_counter() - t0
    ok = acc["k200"] >= acc["k100"] - 0.005 and min(acc["k200"], acc["k100"]) > acc["p0"] and elapsed < 900
    _, _, source = harness._mnist(None, 10000, True)
    report(10, "accuracy trend in k on MNIST-class logistic regression", ok,
           f"data={source}; k=200 {acc['k200']:.4f}, k=100 {acc['k100']:.4f}, p=0 {acc['p0']:.4f}; {elapsed:.0f}s")
    assert ok

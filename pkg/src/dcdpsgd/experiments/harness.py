"""Run grids of (variant x seed), write per-run artifacts and fold them into tables.

Layout under the output directory::

    <variant>/seed_<s>/trace.csv
    <variant>/seed_<s>/privacy_ledger
    summary.csv
    comparison.csv, curves.csv, curves.svg   (compare only)
"""

from __future__ import annotations

import csv
import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dcdpsgd.clipping import ClippingConfig, noise_variance_per_coordinate, threshold_guidance
from dcdpsgd.experiments.data import load_mnist_class
from dcdpsgd.experiments.spec import ExperimentSpec, Variant
from dcdpsgd.grad_engine import SyntheticObjective, dims_for
from dcdpsgd.privacy import LEDGER_NAME, LedgerEntry, calibrate, read_ledger, split_budget, write_ledger
from dcdpsgd.tail_dist import SubWeibullParams
from dcdpsgd.trainer import DataTarget, SyntheticTarget, TrainConfig, TrainTrace, run

TRACE_NAME = "trace.csv"
SUMMARY_COLUMNS = [
    "variant", "algorithm", "clipping", "runs", "final_metric_mean", "final_metric_std",
    "accuracy_mean", "accuracy_std", "eps_tr", "eps_dp", "delta", "sigma_tr", "sigma_dp",
    "noise_var_per_coord",
]


class ArtifactError(RuntimeError):
    """A run directory is missing its trace or ledger."""


class BudgetMismatchError(ValueError):
    pass


@functools.lru_cache(maxsize=4)
def _mnist(data_dir: Optional[str], n_train: Optional[int], allow_surrogate: bool):
    # the data subset is fixed across seeds so that paired runs see the same data
    return load_mnist_class(data_dir, n_train, seed=0, allow_surrogate=allow_surrogate)


def clipping_of(variant: Variant) -> ClippingConfig:
    v = variant.values
    if variant.algorithm == "dc_dpsgd":
        c1 = threshold_guidance(v["theta"], v["delta"], v["c2"]) if v["c1"] == "auto" else v["c1"]
        return ClippingConfig("discriminative", c2=v["c2"], c1=c1, p=v["p"], gamma=v["gamma"])
    return ClippingConfig(variant.clipping, c2=v["c2"], c1=v["c2"], gamma=v["gamma"])


def build_config(variant: Variant, seed: int, data_dir: Optional[str] = None):
    """(TrainConfig, PrivacyBudget) for one run; sigmas come straight from calibrate()."""
    v = variant.values
    if variant.task == "synthetic":
        d = v["d"]
        w_star = np.full(d, v["minimizer_norm"] / math.sqrt(d))
        noise = SubWeibullParams(v["theta"], v["scale"]) if v["scale"] > 0 else None
        target = SyntheticTarget(SyntheticObjective(w_star, v["curvature"], noise), n=v["n"])
    else:
        train, test, _ = _mnist(v.get("data_dir") or data_dir, v.get("n_train"), v["allow_surrogate"])
        target = DataTarget(dims_for(v["model"], train, hidden=v["hidden"]), train, test)
    B = v["batch_size"]
    steps = int(v["epochs"] * target.n / B) if "epochs" in v else v["steps"]
    budget = split_budget(v["epsilon"], v["split"], v["delta"])
    scales = calibrate(budget, B / target.n, steps, v["m2"], v["m1"])
    cfg = TrainConfig(
        target, steps, B, v["lr"], clipping_of(variant), scales,
        subspace_k=max(1, v["k"]),
        subspace_source=SubWeibullParams(v["subspace_theta"], v["subspace_scale"]),
        seed=seed, lr_schedule=v["lr_schedule"], noise_mode=v["noise_mode"], sampling=v["sampling"],
    )
    return cfg, budget


def run_dir(out: Path, variant: str, seed: int) -> Path:
    return Path(out) / variant / f"seed_{seed}"


def run_one(variant: Variant, seed: int, out, override: bool = False, data_dir=None) -> Path:
    """Spend the budget (ledger first, so a conflict aborts before training), then train."""
    cfg, budget = build_config(variant, seed, data_dir)
    where = run_dir(out, variant.name, seed)
    write_ledger(where, LedgerEntry.from_run(budget, cfg.noise, variant.algorithm), override=override)
    trace = run(cfg)
    trace.to_csv(where / TRACE_NAME)
    return where


def _job(args):
    return run_one(*args)


def run_grid(spec: ExperimentSpec, out, seeds: Optional[Sequence[int]] = None, workers: int = 1,
             override: bool = False, data_dir=None) -> List[Path]:
    seeds = list(spec.seeds if seeds is None else seeds)
    jobs = [(v, s, str(out), override, data_dir) for v in spec.variants for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


@dataclass
class RunResult:
    variant: str
    seed: int
    final_metric: float
    accuracy: Optional[float]
    ledger: LedgerEntry
    trace: TrainTrace


def load_run(out, variant: str, seed: int) -> RunResult:
    where = run_dir(out, variant, seed)
    missing = [n for n in (TRACE_NAME, LEDGER_NAME) if not (where / n).is_file()]
    if missing:
        raise ArtifactError(f"{where} is missing {', '.join(missing)}")
    trace = TrainTrace.from_csv(where / TRACE_NAME)
    return RunResult(variant, seed, trace.final_metric, trace.final_accuracy, read_ledger(where), trace)


def _mean_std(xs: Sequence[float]) -> Tuple[float, float]:
    if not xs:
        return math.nan, math.nan
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def summarize(spec: ExperimentSpec, out, seeds: Optional[Sequence[int]] = None) -> List[Dict[str, object]]:
    """Fold the per-run CSVs and ledgers into one row per variant and write summary.csv."""
    seeds = list(spec.seeds if seeds is None else seeds)
    rows = []
    for v in spec.variants:
        results = [load_run(out, v.name, s) for s in seeds]
        m_mean, m_std = _mean_std([r.final_metric for r in results])
        accs = [r.accuracy for r in results if r.accuracy is not None]
        a_mean, a_std = _mean_std(accs)
        led = results[0].ledger
        B = v.values["batch_size"]
        mode = v.values["noise_mode"] if v.algorithm == "dc_dpsgd" else "batch"
        rows.append({
            "variant": v.name, "algorithm": v.algorithm, "clipping": v.clipping, "runs": len(results),
            "final_metric_mean": m_mean, "final_metric_std": m_std,
            "accuracy_mean": a_mean, "accuracy_std": a_std,
            "eps_tr": led.eps_tr, "eps_dp": led.eps_dp, "delta": led.delta,
            "sigma_tr": led.sigma_tr, "sigma_dp": led.sigma_dp,
            "noise_var_per_coord": noise_variance_per_coordinate(clipping_of(v), led.sigma_dp, B, mode),
        })
    _write_rows(Path(out) / "summary.csv", SUMMARY_COLUMNS, rows)
    return rows


def _write_rows(path: Path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if isinstance(r[k], float) and math.isnan(r[k]) else r[k]) for k in columns})


def check_budgets(spec: ExperimentSpec) -> None:
    """All variants must declare the same total epsilon and delta."""
    budgets = {(v.eps_total, v.delta) for v in spec.variants}
    if len(budgets) > 1:
        detail = ", ".join(f"{v.name}: eps={v.eps_total:g} delta={v.delta:g}" for v in spec.variants)
        raise BudgetMismatchError(f"variants declare unequal budgets ({detail})")


def reference_variant(spec: ExperimentSpec) -> Variant:
    if spec.reference:
        for v in spec.variants:
            if v.name == spec.reference:
                return v
        raise ValueError(f"reference variant {spec.reference!r} not in spec")
    for v in spec.variants:
        if v.algorithm == "dc_dpsgd":
            return v
    return spec.variants[0]


def _score(r: RunResult, task: str) -> float:
    """Higher is better: accuracy for data runs, negative final metric for the synthetic task."""
    if task == "synthetic":
        return -r.final_metric
    return r.accuracy if r.accuracy is not None else -r.final_metric


COMPARISON_COLUMNS = ["reference", "baseline", "metric", "reference_mean", "reference_std",
                      "baseline_mean", "baseline_std", "wins", "losses", "pairs"]


def compare(spec: ExperimentSpec, out, seeds: Optional[Sequence[int]] = None,
            plot: bool = True) -> List[Dict[str, object]]:
    """Paired comparison of the reference variant against each other variant."""
    seeds = list(spec.seeds if seeds is None else seeds)
    check_budgets(spec)
    if len(spec.variants) < 2 or len(seeds) < 3:
        raise ValueError("compare needs at least 2 variants and 3 seeds")
    ref = reference_variant(spec)
    results = {v.name: [load_run(out, v.name, s) for s in seeds] for v in spec.variants}
    metric = "final_metric" if ref.task == "synthetic" else "accuracy"
    rows = []
    for v in spec.variants:
        if v.name == ref.name:
            continue
        a = [_score(r, ref.task) for r in results[ref.name]]
        b = [_score(r, ref.task) for r in results[v.name]]
        raw = (lambda xs: [-x for x in xs]) if metric == "final_metric" else (lambda xs: xs)
        ra, rb = _mean_std(raw(a)), _mean_std(raw(b))
        rows.append({
            "reference": ref.name, "baseline": v.name, "metric": metric,
            "reference_mean": ra[0], "reference_std": ra[1], "baseline_mean": rb[0], "baseline_std": rb[1],
            "wins": sum(x > y for x, y in zip(a, b)), "losses": sum(x < y for x, y in zip(a, b)),
            "pairs": len(seeds),
        })
    _write_rows(Path(out) / "comparison.csv", COMPARISON_COLUMNS, rows)
    write_curves(results, Path(out) / "curves.csv")
    if plot:
        plot_curves(results, Path(out) / "curves.svg", metric="metric" if metric == "final_metric" else "accuracy")
    return rows


def write_curves(results: Dict[str, List[RunResult]], path: Path) -> None:
    """Plot-ready long-format training curves."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "seed", "step", "metric", "loss", "accuracy"])
        for name, runs in results.items():
            for r in runs:
                for rec in r.trace.records:
                    w.writerow([name, r.seed, rec.step, repr(rec.metric), repr(rec.loss),
                                "" if rec.accuracy is None else repr(rec.accuracy)])


def plot_curves(results: Dict[str, List[RunResult]], path: Path, metric: str = "metric") -> bool:
    """Seed-averaged curves as SVG; returns False when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, runs in results.items():
        curves = np.array([[getattr(rec, metric) or 0.0 for rec in r.trace.records] for r in runs], dtype=float)
        ax.plot(np.arange(curves.shape[1]), curves.mean(axis=0), label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    if metric == "metric":
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


def k_trend(spec: ExperimentSpec, rows: List[Dict[str, object]]) -> List[Tuple[str, bool, list]]:
    """Per (split, theta) group of DC variants: is the score non-decreasing in k?

    ``k = none`` variants (p = 0) enter every group at k = 0.
    """
    by_name = {r["variant"]: r for r in rows}
    none = [v for v in spec.variants if v.algorithm == "dc_dpsgd" and v.values["p"] == 0]
    groups: Dict[Tuple[float, float], List[Variant]] = {}
    for v in spec.variants:
        if v.algorithm == "dc_dpsgd" and v.values["p"] > 0:
            groups.setdefault((v.values["split"], v.values["theta"]), []).append(v)
    out = []
    for (split, theta), members in sorted(groups.items()):
        ordered = [(0, n) for n in none if n.values["theta"] == theta] + sorted(
            ((m.values["k"], m) for m in members), key=lambda t: t[0])
        scores = []
        for k, m in ordered:
            r = by_name[m.name]
            s = r["accuracy_mean"] if m.task != "synthetic" else -r["final_metric_mean"]
            scores.append((k, s))
        ok = all(b[1] >= a[1] for a, b in zip(scores, scores[1:]))
        out.append((f"split={split:g} theta={theta:g}", ok, scores))
    return out

"""Command-line entry point: ``dcdpsgd <subcommand> ...``.

Exit codes: 0 success, 1 failed bound check, 2 spec/usage error (including
unequal budgets in ``compare``), 3 data missing, 4 run divergence,
5 privacy ledger conflict.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path
from typing import List, Optional

from dcdpsgd.experiments import bounds, harness
from dcdpsgd.experiments.data import DATA_DIR_ENV, DataMissingError, default_data_dir, make_mnist_surrogate
from dcdpsgd.experiments.spec import SpecError, load_spec, parse_seeds
from dcdpsgd.privacy import FeasibilityWarning, LedgerConflictError, calibrate, split_budget
from dcdpsgd.trainer import TrainingDivergedError

EXIT_OK, EXIT_CHECK, EXIT_SPEC, EXIT_DATA, EXIT_DIVERGED, EXIT_LEDGER = 0, 1, 2, 3, 4, 5


def _seeds(text: str) -> List[int]:
    try:
        seeds = parse_seeds(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError("seeds must be a non-empty list of distinct integers")
    return seeds


def _grid_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", required=True, type=Path, help="experiment spec file")
    p.add_argument("--out", type=Path, help="output directory (default: spec output_dir or runs/<name>)")
    p.add_argument("--seeds", type=_seeds, help="override the spec seeds, e.g. 0,1,2 or 0-4")
    p.add_argument("--workers", type=int, default=1, help="parallel runs (default 1)")
    p.add_argument("--override-ledger", action="store_true",
                   help="overwrite existing privacy ledgers (recorded in the ledger)")
    p.add_argument("--data-dir", type=Path,
                   help=f"dataset directory (default: ${DATA_DIR_ENV} or ~/.cache/dcdpsgd)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcdpsgd", description="Discriminative-clipping DP-SGD toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run every (variant x seed) of a spec and write a summary")
    _grid_args(p)

    p = sub.add_parser("compare", help="train, then compare the reference variant against the rest")
    _grid_args(p)
    p.add_argument("--no-plot", action="store_true", help="skip the SVG curve plot")

    p = sub.add_parser("verify-bounds", help="empirical checks of the sampler, trace bound and calibration")
    p.add_argument("--quick", action="store_true", help="fewer draws and trials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help="skip orthonormalization (negative control; the check must fail)")
    p.add_argument("--planted", action="store_true", help="also run the planted-recall sweep")

    p = sub.add_parser("calibrate", help="print noise multipliers for a budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, help="sampling ratio B/n")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n", type=int, help="dataset size (with --batch-size instead of --q)")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--split", type=float, default=0.0, help="fraction of epsilon spent on traces")
    p.add_argument("--m2", type=float, default=1.25)
    p.add_argument("--m1", type=float, default=1.0)

    p = sub.add_parser("make-data", help="write the surrogate MNIST-format IDX files")
    p.add_argument("--out", type=Path, help=f"target directory (default: ${DATA_DIR_ENV} or ~/.cache/dcdpsgd)")
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _err(msg: str) -> None:
    print(f"dcdpsgd: {msg}", file=sys.stderr)


def _print_rows(rows, columns) -> None:
    print(",".join(columns))
    for r in rows:
        print(",".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in columns))


def _run_grid(args, compare: bool) -> int:
    try:
        spec = load_spec(args.spec)
    except OSError as e:
        _err(f"cannot read spec: {e}")
        return EXIT_SPEC
    except SpecError as e:
        _err(f"{args.spec}: {e}")
        return EXIT_SPEC
    seeds = args.seeds or spec.seeds
    if compare:
        try:
            harness.check_budgets(spec)
        except harness.BudgetMismatchError as e:
            _err(str(e))
            return EXIT_SPEC
        if len(spec.variants) < 2 or len(seeds) < 3:
            _err("compare needs at least 2 variants and 3 seeds")
            return EXIT_SPEC
    out = args.out or Path(spec.output_dir or Path("runs") / spec.name)
    data_dir = str(args.data_dir) if args.data_dir else None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FeasibilityWarning)
            harness.run_grid(spec, out, seeds, args.workers, args.override_ledger, data_dir)
    except DataMissingError as e:
        _err(str(e))
        return EXIT_DATA
    except TrainingDivergedError as e:
        _err(str(e))
        return EXIT_DIVERGED
    except LedgerConflictError as e:
        _err(f"{e} (use --override-ledger to rerun)")
        return EXIT_LEDGER
    rows = harness.summarize(spec, out, seeds)
    _print_rows(rows, ["variant", "runs", "final_metric_mean", "final_metric_std", "accuracy_mean",
                       "accuracy_std", "noise_var_per_coord"])
    if spec.trend_check == "k":
        for label, ok, scores in harness.k_trend(spec, rows):
            shown = " ".join(f"k={k}:{s:.4g}" for k, s in scores)
            print(f"[{'PASS' if ok else 'FAIL'}] k trend {label}: {shown}")
    if compare:
        table = harness.compare(spec, out, seeds, plot=not args.no_plot)
        print()
        _print_rows(table, harness.COMPARISON_COLUMNS)
    print(f"artifacts in {out}")
    return EXIT_OK


def _verify(args) -> int:
    results = bounds.run_all(quick=args.quick, inject_fault=args.inject_fault, seed=args.seed)
    if args.planted:
        results += bounds.planted_recall_sweep()
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def _calibrate(args) -> int:
    if args.q is None:
        if args.batch_size is None or args.n is None:
            _err("give --q or both --batch-size and --n")
            return EXIT_SPEC
        q = args.batch_size / args.n
    else:
        q = args.q
    try:
        budget = split_budget(args.epsilon, args.split, args.delta)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", FeasibilityWarning)
            scales = calibrate(budget, q, args.steps, args.m2, args.m1)
    except ValueError as e:
        _err(str(e))
        return EXIT_SPEC
    for key, val in (("eps_tr", budget.eps_tr), ("eps_dp", budget.eps_dp), ("delta", budget.delta),
                     ("q", q), ("T", args.steps), ("m2", args.m2), ("sigma_tr", scales.sigma_tr),
                     ("sigma_dp", scales.sigma_dp), ("trace_stage", scales.trace_stage)):
        print(f"{key} = {val}")
    for w in caught:
        print(f"# warning: {w.message}")
    return EXIT_OK


def _make_data(args) -> int:
    out = args.out or default_data_dir()
    for path in make_mnist_surrogate(out, args.n_train, args.n_test, args.seed):
        print(path)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("train", "compare"):
        return _run_grid(args, compare=args.command == "compare")
    if args.command == "verify-bounds":
        return _verify(args)
    if args.command == "calibrate":
        return _calibrate(args)
    return _make_data(args)


if __name__ == "__main__":
    sys.exit(main())

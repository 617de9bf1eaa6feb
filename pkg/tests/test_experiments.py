import csv
import math
from pathlib import Path

import numpy as np
import pytest

from dcdpsgd.experiments import bounds, harness
from dcdpsgd.experiments.cli import main
from dcdpsgd.experiments.spec import PRESETS, SpecError, parse_seeds, parse_spec
from dcdpsgd.privacy import LEDGER_NAME, read_ledger

SPECS = Path(__file__).resolve().parents[1] / "specs"

MINI = """\
name = mini
seeds = 0,1,2
task = synthetic
d = 10
steps = 20
batch_size = 16
epsilon = 8

[variant.dc]
algorithm = dc_dpsgd
k = 5

[variant.base]
clipping = abadi
"""


# -- spec parsing -------------------------------------------------------------


def test_parse_defaults_and_overrides():
    spec = parse_spec(MINI)
    assert spec.seeds == [0, 1, 2]
    dc, base = spec.variants
    assert (dc.algorithm, dc.clipping, dc.values["k"], dc.values["split"]) == ("dc_dpsgd", "discriminative", 5, 0.5)
    assert (base.algorithm, base.values["split"]) == ("dpsgd", 0.0)
    assert dc.values["d"] == 10 and base.values["steps"] == 20


def test_preset_fills_dataset_settings():
    spec = parse_spec("[variant.a]\npreset = cifar10\n")
    v = spec.variants[0].values
    assert (v["c2"], v["lr"], v["batch_size"], v["c1"]) == (0.01, 10.0, 256, 0.1)
    assert set(PRESETS) == {"mnist", "fmnist", "cifar10", "imagenette"}
    spec = parse_spec("[variant.a]\npreset = imagenette\nbatch_size = 50\n")
    assert spec.variants[0].values["batch_size"] == 50


def test_k_none_disables_identification():
    v = parse_spec("[variant.a]\nalgorithm = dc_dpsgd\nk = none\n").variants[0]
    assert v.values["p"] == 0.0 and v.values["split"] == 0.0


@pytest.mark.parametrize("text,line,column", [
    ("steps = 10\n[variant.a]\nbatch_size = lots\n", 3, 14),
    ("name = x\nbogus = 1\n[variant.a]\n", 2, 1),
    ("[variant.a]\n  k = 3\nthis line has no separator\n", 3, 1),
    ("[variant.a]\nk = 1\nk = 2\n", 3, 1),
    ("[weird]\nk = 1\n", 1, 2),
    ("[variant.a]\nalgorithm = sgd\n", 2, 13),
    ("seeds = 1,1\n[variant.a]\n", 1, 9),
])
def test_malformed_spec_locations(text, line, column):
    with pytest.raises(SpecError) as err:
        parse_spec(text)
    assert (err.value.line, err.value.column) == (line, column)
    assert f"line {line}, column {column}" in str(err.value)


def test_no_variants():
    with pytest.raises(SpecError):
        parse_spec("name = x\n")


def test_parse_seeds():
    assert parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3, 1 2") == [3, 1, 2]


def test_shipped_specs_parse():
    names = {p.stem: parse_spec(p.read_text(), str(p)) for p in SPECS.glob("*.ini")}
    assert len(names["k_split_grid"].variants) == 10
    assert names["heavy_tail_compare"].variants[0].values["theta"] == 2.0
    assert names["light_tail_compare"].variants[0].values["theta"] == 0.5


# -- harness ------------------------------------------------------------------


def test_build_config_uses_calibrated_noise():
    spec = parse_spec(MINI)
    cfg, budget = harness.build_config(spec.variants[0], 0)
    assert budget.eps_tr == budget.eps_dp == 4.0
    assert cfg.noise.q == 16 / 10000 and cfg.noise.T == 20
    assert math.isclose(cfg.clipping.c1, 0.1 * math.sqrt(125))


def test_grid_artifacts_and_summary_fold(tmp_path):
    spec = parse_spec(MINI)
    harness.run_grid(spec, tmp_path)
    rows = harness.summarize(spec, tmp_path)
    for v in spec.variants:
        for s in spec.seeds:
            d = harness.run_dir(tmp_path, v.name, s)
            assert sorted(p.name for p in d.iterdir()) == sorted([LEDGER_NAME, "trace.csv"])
    # recompute the summary from the raw CSV final rows
    for row, v in zip(rows, spec.variants):
        finals = []
        for s in spec.seeds:
            with open(harness.run_dir(tmp_path, v.name, s) / "trace.csv") as f:
                finals.append(float(list(csv.DictReader(f))[-1]["metric"]))
        assert row["final_metric_mean"] == pytest.approx(np.mean(finals), rel=1e-15)
        assert row["final_metric_std"] == pytest.approx(np.std(finals, ddof=1), rel=1e-12)
    with open(tmp_path / "summary.csv") as f:
        assert [r["variant"] for r in csv.DictReader(f)] == ["dc", "base"]


def test_parallel_matches_serial(tmp_path):
    spec = parse_spec(MINI)
    harness.run_grid(spec, tmp_path / "a", workers=1)
    harness.run_grid(spec, tmp_path / "b", workers=3)
    for v in spec.variants:
        for s in spec.seeds:
            a = (harness.run_dir(tmp_path / "a", v.name, s) / "trace.csv").read_text()
            b = (harness.run_dir(tmp_path / "b", v.name, s) / "trace.csv").read_text()
            assert a == b


def test_missing_artifact_detected(tmp_path):
    spec = parse_spec(MINI)
    harness.run_grid(spec, tmp_path)
    (harness.run_dir(tmp_path, "dc", 1) / "trace.csv").unlink()
    with pytest.raises(harness.ArtifactError):
        harness.summarize(spec, tmp_path)


def test_compare_outputs(tmp_path):
    spec = parse_spec(MINI)
    harness.run_grid(spec, tmp_path)
    rows = harness.compare(spec, tmp_path, plot=False)
    assert rows[0]["reference"] == "dc" and rows[0]["baseline"] == "base"
    assert rows[0]["wins"] + rows[0]["losses"] <= 3
    again = harness.compare(spec, tmp_path, plot=False)
    assert rows == again
    with open(tmp_path / "curves.csv") as f:
        assert len(list(csv.DictReader(f))) == 2 * 3 * 20


def test_unequal_budgets_rejected():
    spec = parse_spec(MINI + "epsilon = 4\n")
    with pytest.raises(harness.BudgetMismatchError):
        harness.check_budgets(spec)


def test_k_trend_report():
    spec = parse_spec((SPECS / "k_split_grid.ini").read_text())
    rows = [{"variant": v.name, "final_metric_mean": 1.0 / (1 + v.values["k"]), "accuracy_mean": math.nan}
            for v in spec.variants]
    report = harness.k_trend(spec, rows)
    assert len(report) == 3 and all(ok for _, ok, _ in report)
    assert [k for k, _ in report[0][2]] == [0, 100, 150, 200]


# -- CLI ----------------------------------------------------------------------


def test_cli_train_minimal(tmp_path, capsys):
    assert main(["train", "--spec", str(SPECS / "synthetic_minimal.ini"), "--out", str(tmp_path)]) == 0
    run = tmp_path / "dc" / "seed_0"
    assert (run / "trace.csv").is_file() and read_ledger(run) is not None
    assert (tmp_path / "summary.csv").is_file()
    # rerun refuses to spend the budget twice
    assert main(["train", "--spec", str(SPECS / "synthetic_minimal.ini"), "--out", str(tmp_path)]) == 5
    assert main(["train", "--spec", str(SPECS / "synthetic_minimal.ini"), "--out", str(tmp_path),
                 "--override-ledger"]) == 0
    assert read_ledger(run).note.startswith("overwrote")


def test_cli_malformed_spec(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[variant.a]\nsteps = ten\n")
    assert main(["train", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 2, column 9" in capsys.readouterr().err


def test_cli_compare_budget_guard(tmp_path, capsys):
    spec = tmp_path / "s.ini"
    spec.write_text(MINI.replace("[variant.base]", "[variant.base]\nepsilon = 4"))
    assert main(["compare", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "unequal budgets" in capsys.readouterr().err


def test_cli_compare(tmp_path, capsys):
    spec = tmp_path / "s.ini"
    spec.write_text(MINI)
    assert main(["compare", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "comparison.csv").is_file()


def test_cli_data_missing(tmp_path, capsys):
    spec = tmp_path / "s.ini"
    spec.write_text("[variant.a]\ntask = mnist\nallow_surrogate = false\nsteps = 2\n")
    assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o"),
                 "--data-dir", str(tmp_path / "empty")]) == 3


def test_cli_divergence(tmp_path, capsys):
    spec = tmp_path / "s.ini"
    spec.write_text("[variant.a]\nclipping = abadi\nc2 = 1e300\nlr = 1e300\nscale = 0\nsteps = 5\n")
    assert main(["train", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 4


def test_cli_calibrate(capsys):
    assert main(["calibrate", "--epsilon", "0.125", "--delta", str(1 / math.e), "--q", "0.01",
                 "--steps", "100", "--m2", "1"]) == 0
    out = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines() if " = " in line)
    assert float(out["sigma_dp"]) == pytest.approx(0.8)
    assert out["trace_stage"] == "False"


def test_cli_make_data(tmp_path, capsys):
    assert main(["make-data", "--out", str(tmp_path), "--n-train", "50", "--n-test", "20"]) == 0
    assert len(list(tmp_path.iterdir())) == 4


def test_cli_verify_fault_injection(capsys, monkeypatch):
    monkeypatch.setattr(bounds, "run_all", lambda quick, inject_fault, seed: [
        bounds.orthonormality_check(inject_fault=inject_fault)])
    assert main(["verify-bounds", "--inject-fault"]) == 1
    assert "[FAIL] orthonormality" in capsys.readouterr().out
    assert main(["verify-bounds"]) == 0


# -- bounds module ------------------------------------------------------------


def test_quick_bound_checks_pass():
    results = bounds.sampler_tail_sweep(n_draws=100_000)
    results += bounds.trace_error_frequency(d=100, ks=(20,), trials=50, ensemble_factor=4)
    results += bounds.bound_k_sweep() + bounds.calibration_identities(n=20)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_trace_mean_matches_k_over_d():
    r = bounds.trace_error_frequency(d=100, ks=(20,), sigmas=(0.0,), trials=50, ensemble_factor=20)[0]
    assert r.detail["lambda_hat"] == pytest.approx(0.2, abs=0.01)

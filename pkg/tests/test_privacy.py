import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcdpsgd.privacy import (
    FeasibilityWarning,
    LEDGER_NAME,
    LedgerConflictError,
    LedgerEntry,
    PrivacyBudget,
    calibrate,
    read_ledger,
    split_budget,
    write_ledger,
)


def test_calibrate_worked_example():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FeasibilityWarning)
        ns = calibrate(PrivacyBudget(0.0, 0.125, 1 / math.e), q=0.01, T=100, m2=1.0)
    assert ns.sigma_dp == pytest.approx(0.8, rel=1e-14)
    assert ns.sigma_tr == 0.0 and not ns.trace_stage


def test_calibrate_both_stages():
    ns = calibrate(PrivacyBudget(4.0, 4.0, 1e-5), q=0.0128, T=390)
    assert ns.sigma_tr == ns.sigma_dp
    assert ns.trace_stage and ns.m2 == 1.25
    expected = math.sqrt(1.25 * 390 * 0.0128**2 * math.log(1e5)) / 4.0
    assert ns.sigma_dp == pytest.approx(expected, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 10), st.floats(1e-8, 0.5), st.floats(1e-4, 0.4), st.integers(1, 5000))
def test_homogeneity(eps, delta, q, T):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FeasibilityWarning)

        def s(e=eps, qq=q, TT=T):
            return calibrate(PrivacyBudget(0.0, e, delta), qq, TT).sigma_dp

        base = s()
        assert abs(s(TT=2 * T) / base - math.sqrt(2)) <= 1e-12
        assert abs(s(e=eps / 2) / base - 2) <= 1e-12
        assert abs(s(qq=2 * q) / base - 2) <= 1e-12 or 2 * q > 1


def test_calibrate_errors():
    with pytest.raises(ValueError):
        calibrate(PrivacyBudget(1.0, 0.0, 1e-5), 0.1, 10)
    with pytest.raises(ValueError):
        PrivacyBudget(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        PrivacyBudget(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        calibrate(PrivacyBudget(1.0, 1.0, 1e-5), 0.0, 10)
    with pytest.raises(ValueError):
        calibrate(PrivacyBudget(1.0, 1.0, 1e-5), 0.5, 0)


def test_feasibility_warning_only():
    with pytest.warns(FeasibilityWarning):
        ns = calibrate(PrivacyBudget(0.0, 8.0, 1e-5), 0.01, 10)
    assert ns.sigma_dp > 0


def test_split_examples():
    assert split_budget(8, 0.5, 1e-5) == PrivacyBudget(4.0, 4.0, 1e-5)
    assert split_budget(8, 0.25, 1e-5) == PrivacyBudget(2.0, 6.0, 1e-5)
    b = split_budget(8, 0.0, 1e-5)
    assert b.eps_tr == 0.0 and b.eps_dp == 8.0
    assert not calibrate(b, 0.0128, 390).trace_stage
    with pytest.raises(ValueError):
        split_budget(8, 1.0, 1e-5)
    with pytest.raises(ValueError):
        split_budget(0, 0.5, 1e-5)


def test_split_conservation_random():
    rng = np.random.default_rng(0)
    for _ in range(20000):
        total = float(rng.uniform(1e-3, 100))
        b = split_budget(total, float(rng.uniform(0, 1)), 1e-5)
        assert abs((b.eps_tr + b.eps_dp) - total) <= 1e-15


def _entry():
    b = split_budget(8.0, 0.5, 1e-5)
    return LedgerEntry.from_run(b, calibrate(b, 0.0128, 390), "dc_dpsgd")


def test_ledger_round_trip(tmp_path):
    e = _entry()
    assert LedgerEntry.from_text(e.to_text()) == e
    write_ledger(tmp_path, e)
    assert read_ledger(tmp_path) == e
    text = (tmp_path / LEDGER_NAME).read_text()
    assert "m2 = 1.25" in text and "sigma_dp = " in text


def test_ledger_conflict_and_override(tmp_path):
    e = _entry()
    write_ledger(tmp_path, e)
    with pytest.raises(LedgerConflictError):
        write_ledger(tmp_path, e)
    write_ledger(tmp_path, e, override=True)
    again = read_ledger(tmp_path)
    assert again.note.startswith("overwrote previous ledger")
    assert again.sigma_dp == e.sigma_dp


def test_read_missing(tmp_path):
    assert read_ledger(tmp_path) is None

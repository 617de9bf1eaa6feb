"""Noise calibration, budget splitting and the per-run spend ledger.

sigma^2 = m2 * T * q^2 * ln(1/delta) / eps^2 for each budget component.
"""

from __future__ import annotations

import datetime as _dt
import math
import os
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

DEFAULT_M2 = 1.25
DEFAULT_M1 = 1.0
LEDGER_NAME = "privacy_ledger"


class LedgerConflictError(FileExistsError):
    pass


class FeasibilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    eps_tr: float
    eps_dp: float
    delta: float

    def __post_init__(self):
        if self.eps_tr < 0 or self.eps_dp < 0:
            raise ValueError("budget components must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def total(self) -> float:
        return self.eps_tr + self.eps_dp


@dataclass(frozen=True)
class NoiseScales:
    sigma_tr: float
    sigma_dp: float
    q: float
    T: int
    m2: float
    trace_stage: bool = True  # False when eps_tr = 0: traces released without noise

    @property
    def private(self) -> bool:
        return self.trace_stage


def noise_multiplier(eps: float, delta: float, q: float, T: int, m2: float = DEFAULT_M2) -> float:
    return math.sqrt(m2 * T * q * q * math.log(1.0 / delta)) / eps


def calibrate(budget: PrivacyBudget, q: float, T: int, m2: float = DEFAULT_M2,
              m1: float = DEFAULT_M1) -> NoiseScales:
    """Noise multipliers for the trace and gradient stages.

    A zero trace budget disables the trace-noise stage (``trace_stage=False``,
    ``sigma_tr=0``). A zero gradient budget is rejected.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if m2 <= 0:
        raise ValueError("m2 must be positive")
    if budget.eps_dp <= 0:
        raise ValueError("eps_dp must be positive: training needs gradient noise")
    limit = m1 * q * q * T
    for name, eps in (("eps_tr", budget.eps_tr), ("eps_dp", budget.eps_dp)):
        if eps > limit:
            warnings.warn(f"{name}={eps:g} exceeds m1*q^2*T={limit:g}; "
                          "the closed-form calibration may not hold", FeasibilityWarning,
                          stacklevel=2)
    sigma_dp = noise_multiplier(budget.eps_dp, budget.delta, q, T, m2)
    if budget.eps_tr > 0:
        return NoiseScales(noise_multiplier(budget.eps_tr, budget.delta, q, T, m2), sigma_dp, q, T, m2)
    return NoiseScales(0.0, sigma_dp, q, T, m2, trace_stage=False)


def split_budget(total_eps: float, fraction_tr: float, delta: float) -> PrivacyBudget:
    """eps_tr = fraction_tr * total, eps_dp = the rest."""
    if not total_eps > 0:
        raise ValueError("total_eps must be positive")
    if not 0.0 <= fraction_tr < 1.0:
        raise ValueError("fraction_tr must lie in [0, 1)")
    total_eps = float(total_eps)
    eps_dp = total_eps - fraction_tr * total_eps
    # recomputing eps_tr from eps_dp makes eps_tr + eps_dp == total_eps in floating point
    eps_tr = total_eps - eps_dp
    return PrivacyBudget(eps_tr, eps_dp, delta)


# -- ledger -------------------------------------------------------------------


@dataclass
class LedgerEntry:
    eps_tr: float
    eps_dp: float
    delta: float
    q: float
    T: int
    sigma_tr: float
    sigma_dp: float
    m2: float
    trace_stage: bool = True
    algorithm: str = ""
    note: str = ""

    @classmethod
    def from_run(cls, budget: PrivacyBudget, scales: NoiseScales, algorithm: str = "") -> "LedgerEntry":
        return cls(budget.eps_tr, budget.eps_dp, budget.delta, scales.q, scales.T,
                   scales.sigma_tr, scales.sigma_dp, scales.m2, scales.trace_stage, algorithm)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LedgerEntry":
        raw = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            if f.type in ("float", float):
                kwargs[f.name] = float(v)
            elif f.type in ("int", int):
                kwargs[f.name] = int(v)
            elif f.type in ("bool", bool):
                kwargs[f.name] = v == "True"
            else:
                kwargs[f.name] = v
        return cls(**kwargs)


def write_ledger(run_dir, entry: LedgerEntry, override: bool = False) -> Path:
    """Write ``privacy_ledger`` in ``run_dir``; refuse if one exists unless ``override``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LEDGER_NAME
    if override and path.exists():
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        entry = LedgerEntry(**{**asdict(entry), "note": f"overwrote previous ledger at {stamp}"})
        path.write_text(entry.to_text(), encoding="utf-8")
        return path
    try:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    except FileExistsError:
        raise LedgerConflictError(f"{path} exists; budget already spent for this run") from None
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(entry.to_text())
    return path


def read_ledger(run_dir) -> Optional[LedgerEntry]:
    path = Path(run_dir) / LEDGER_NAME
    if not path.exists():
        return None
    return LedgerEntry.from_text(path.read_text(encoding="utf-8"))

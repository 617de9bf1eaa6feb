"""Experiment spec files: flat ``key = value`` defaults plus ``[variant.N]`` sections.

Keys given before the first section apply to every variant; a variant may
override any of them. ``preset = mnist`` (or fmnist, cifar10, imagenette)
fills in the per-dataset (c2, lr, batch_size) tuple and c1 = 10 c2 before
explicit keys are applied.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

# per-dataset (c2, lr, batch size) from the experimental settings; c1 = 10 c2
PRESETS: Dict[str, Dict[str, str]] = {
    "mnist": {"c2": "0.1", "lr": "0.1", "batch_size": "128"},
    "fmnist": {"c2": "0.1", "lr": "0.1", "batch_size": "128"},
    "cifar10": {"c2": "0.01", "lr": "10", "batch_size": "256"},
    "imagenette": {"c2": "0.15", "lr": "1e-4", "batch_size": "1000"},
}

TOP_KEYS = {"name", "seeds", "output_dir", "reference", "trend_check"}
VARIANT_KEYS = {
    "label", "algorithm", "clipping", "task", "preset",
    # synthetic objective
    "d", "n", "theta", "scale", "curvature", "minimizer_norm",
    # data
    "model", "hidden", "n_train", "data_dir", "allow_surrogate",
    # loop
    "steps", "epochs", "batch_size", "lr", "lr_schedule", "sampling", "noise_mode",
    # privacy
    "epsilon", "delta", "split", "m2", "m1",
    # clipping and identification
    "c2", "c1", "p", "k", "subspace_theta", "subspace_scale", "gamma",
}
ALGORITHMS = ("dpsgd", "dc_dpsgd")
TASKS = ("synthetic", "mnist")


class SpecError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)
        self.line, self.column = line, column


@dataclass
class Variant:
    name: str
    algorithm: str
    clipping: str
    task: str
    values: Dict[str, object] = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def eps_total(self) -> float:
        return float(self.values["epsilon"])

    @property
    def delta(self) -> float:
        return float(self.values["delta"])


@dataclass
class ExperimentSpec:
    name: str
    variants: List[Variant]
    seeds: List[int]
    output_dir: Optional[str] = None
    reference: Optional[str] = None
    trend_check: Optional[str] = None

    def __post_init__(self):
        if not self.variants:
            raise SpecError("spec defines no variants")
        if len(set(self.seeds)) != len(self.seeds):
            raise SpecError(f"seeds must be distinct, got {self.seeds}")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate variant labels {names}")


DEFAULTS = {
    "task": "synthetic", "d": "100", "n": "10000", "theta": "2", "scale": "1", "curvature": "1",
    "minimizer_norm": "5", "model": "logistic", "hidden": "0", "allow_surrogate": "true",
    "steps": "500", "batch_size": "64", "lr": "0.1", "lr_schedule": "constant",
    "sampling": "uniform", "noise_mode": "per_sample", "epsilon": "8", "delta": "1e-5",
    "m2": "1.25", "m1": "1.0", "c2": "0.1", "p": "0.1", "k": "200", "subspace_theta": "2",
    "subspace_scale": "1", "gamma": "0.01",
}


def _locate(lines: List[str], section: Optional[str], key: str, at_key: bool = False):
    """(line, column) of the value of ``key`` in ``section`` (None = before the first header)."""
    current = None
    for i, text in enumerate(lines, start=1):
        head = re.match(r"\s*\[([^\]]+)\]", text)
        if head:
            current = head.group(1).strip()
            continue
        m = re.match(r"(\s*)([^=:#;\s][^=:]*?)\s*[=:]\s*", text)
        if m and current == section and m.group(2).strip().lower() == key:
            return i, (len(m.group(1)) + 1) if at_key else m.end() + 1
    return 0, 0


def _to_float(raw, name, where):
    try:
        return float(raw)
    except ValueError:
        raise SpecError(f"{name} must be a number, got {raw!r}", *where) from None


def _to_int(raw, name, where):
    try:
        return int(raw)
    except ValueError:
        raise SpecError(f"{name} must be an integer, got {raw!r}", *where) from None


def _to_bool(raw, name, where):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"{name} must be a boolean, got {raw!r}", *where)


INT_KEYS = {"d", "n", "hidden", "n_train", "steps", "batch_size"}
FLOAT_KEYS = {"theta", "scale", "curvature", "minimizer_norm", "epochs", "lr", "epsilon", "delta",
              "split", "m2", "m1", "c2", "p", "subspace_theta", "subspace_scale", "gamma"}


def _variant(section: str, raw: Dict[str, str], lines: List[str], sec_key: Optional[str]) -> Variant:
    def where(key):
        pos = _locate(lines, sec_key, key)
        return pos if pos[0] else _locate(lines, None, key)

    merged = dict(DEFAULTS)
    preset = raw.get("preset")
    if preset:
        if preset not in PRESETS:
            raise SpecError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", *where("preset"))
        merged.update(PRESETS[preset])
        merged["c1"] = repr(10 * float(PRESETS[preset]["c2"]))
        merged["task"] = "mnist"
    merged.update(raw)

    values: Dict[str, object] = {}
    for key, text in merged.items():
        if key in INT_KEYS:
            values[key] = _to_int(text, key, where(key))
        elif key in FLOAT_KEYS:
            values[key] = _to_float(text, key, where(key))
        elif key == "allow_surrogate":
            values[key] = _to_bool(text, key, where(key))
        else:
            values[key] = text

    clipping = str(values.get("clipping", "discriminative" if values.get("algorithm") == "dc_dpsgd" else "abadi"))
    algorithm = str(values.get("algorithm", "dc_dpsgd" if clipping == "discriminative" else "dpsgd"))
    if algorithm not in ALGORITHMS:
        raise SpecError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}", *where("algorithm"))
    if clipping not in ("abadi", "auto_s", "discriminative"):
        raise SpecError(f"unknown clipping {clipping!r}", *where("clipping"))
    if (algorithm == "dc_dpsgd") != (clipping == "discriminative"):
        raise SpecError(f"algorithm {algorithm} cannot use clipping {clipping}", *where("clipping"))
    task = str(values["task"])
    if task not in TASKS:
        raise SpecError(f"task must be one of {TASKS}, got {task!r}", *where("task"))

    k = str(values["k"]).strip().lower()
    if k == "none":
        values["k"], values["p"] = 0, 0.0
    else:
        values["k"] = _to_int(k, "k", where("k"))
    c1 = str(values.get("c1", "auto")).strip().lower()
    if c1 != "auto":
        values["c1"] = _to_float(c1, "c1", where("c1"))
    else:
        values["c1"] = "auto"
    if "split" not in values:
        values["split"] = 0.5 if algorithm == "dc_dpsgd" and values["p"] > 0 else 0.0
    if algorithm == "dpsgd":
        values["split"] = 0.0
    if not 0.0 <= values["split"] < 1.0:
        raise SpecError("split must lie in [0, 1)", *where("split"))
    for key in ("epsilon", "lr", "c2"):
        if not values[key] > 0 or math.isnan(values[key]):
            raise SpecError(f"{key} must be positive", *where(key))
    label = str(values.pop("label", section))
    return Variant(label, algorithm, clipping, task, values)


def parse_spec(text: str, source: str = "<spec>") -> ExperimentSpec:
    """Parse spec text; every error carries the 1-based line and column."""
    lines = text.splitlines()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        # one synthetic header line so leading flat keys land in DEFAULT
        parser.read_string("[DEFAULT]\n" + text, source=source)
    except configparser.DuplicateOptionError as e:
        raise SpecError(f"duplicate key {e.option!r}", (e.lineno or 1) - 1, 1) from None
    except configparser.DuplicateSectionError as e:
        raise SpecError(f"duplicate section [{e.section}]", (e.lineno or 1) - 1, 1) from None
    except configparser.ParsingError as e:
        lineno, _ = e.errors[0]
        raise SpecError("expected 'key = value' or '[section]'", lineno - 1, 1) from None

    top = dict(parser.defaults())
    for key in top:
        if key not in TOP_KEYS | VARIANT_KEYS:
            raise SpecError(f"unknown key {key!r}", *_locate(lines, None, key, at_key=True))
    variants = []
    for section in parser.sections():
        if not re.fullmatch(r"variant\.\w+", section):
            line, _ = _locate_section(lines, section)
            raise SpecError(f"unknown section [{section}]; expected [variant.N]", line, 2)
        items = dict(parser.items(section))
        for key in items:
            if key not in VARIANT_KEYS | TOP_KEYS:
                raise SpecError(f"unknown key {key!r} in [{section}]", *_locate(lines, section, key, at_key=True))
        raw = {k: v for k, v in items.items() if k in VARIANT_KEYS}
        variants.append(_variant(section.split(".", 1)[1], raw, lines, section))
    if not variants:
        raise SpecError("spec defines no [variant.N] sections", len(lines) or 1, 1)
    seeds_text = top.get("seeds", "0")
    try:
        seeds = parse_seeds(seeds_text)
    except ValueError:
        raise SpecError(f"bad seeds {seeds_text!r}", *_locate(lines, None, "seeds")) from None
    try:
        return ExperimentSpec(top.get("name", Path(source).stem), variants, seeds, top.get("output_dir"),
                              top.get("reference"), top.get("trend_check"))
    except SpecError as e:
        if "seeds" in str(e):
            raise SpecError(str(e), *_locate(lines, None, "seeds")) from None
        raise


def _locate_section(lines, section):
    for i, text in enumerate(lines, start=1):
        if re.match(rf"\s*\[{re.escape(section)}\]", text):
            return i, 1
    return 0, 0


def parse_seeds(text: str) -> List[int]:
    """``0,1,2`` or ``0-4`` (inclusive range)."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", text)
    if m:
        return list(range(int(m.group(1)), int(m.group(2)) + 1))
    return [int(s) for s in re.split(r"[,\s]+", text) if s]


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    return parse_spec(path.read_text(encoding="utf-8"), source=str(path))

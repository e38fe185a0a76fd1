"""Experiment configuration, execution, reporting and parameter sweeps."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import bounds
from .certificates import CheckContext, CheckResult, available_checks, run_checks
from .errors import ConfigError
from .garnet import GarnetSpec, generate_garnet, generate_garnet_ssp, generate_layered_ssp
from .lfa import (
    constant_features,
    gaussian_features,
    identity_features,
    load_features,
    run_dspi_lfa,
    run_npg_lfa,
    tile_features,
)
from .mdp import TabularMdp
from .regularizers import Regularizer
from .solvers import StepsizeSchedule, run_dspi, run_dual_averaged_pi, run_npg, run_pda, run_pi, run_vi
from .ssp import SspMdp, run_dspi_ssp, run_npg_ssp
from .trace import SolverTrace

REPORT_SCHEMA_VERSION = "1.0"
OUTPUT_ROOT_ENV = "DSPI_OUTPUT_ROOT"

SOLVERS = ("pi", "vi", "dspi", "pda", "npg", "dpi", "dspi-lfa", "npg-lfa", "dspi-ssp", "npg-ssp")
SSP_SOLVERS = ("dspi-ssp", "npg-ssp")
GRID_KEYS = {
    "gamma": ("instance", "gamma"),
    "beta": ("solver", "beta"),
    "n": ("instance", "n"),
    "m": ("instance", "m"),
    "seed": ("instance", "seed"),
}

DEFAULTS: dict[str, Any] = {
    "instance": {"kind": "garnet", "n": 10, "m": 4, "branching": 3, "gamma": 0.9, "seed": 0},
    "solver": {"id": "dspi", "nu": "entropy", "beta": 0.5, "k_max": 200, "schedule": "constant_after_one"},
    "features": {"kind": "gaussian", "d": 4, "seed": 0},
    "checks": {"names": "all", "eps": 1e-3, "envelope_constant_scale": 1.0},
    "output": {"dir": None},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.strip().lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``section.key=value`` (value parsed as JSON when possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    path, value = assignment.split("=", 1)
    keys = path.strip().split(".")
    if len(keys) < 2 or not all(keys):
        raise ConfigError(f"override path {path!r} must name a section and a key")
    out = copy.deepcopy(doc)
    node = out
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} runs through a non-table value")
    node[keys[-1]] = _parse_value(value)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None


@dataclass
class ExperimentConfig:
    instance: dict
    solver: dict
    features: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {sorted(DEFAULTS)}")
        merged = _merge(DEFAULTS, doc)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        doc = load_config_file(path)
        for o in overrides:
            doc = apply_override(doc, o)
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "instance": copy.deepcopy(self.instance),
            "solver": copy.deepcopy(self.solver),
            "features": copy.deepcopy(self.features),
            "checks": copy.deepcopy(self.checks),
            "output": copy.deepcopy(self.output),
        }

    @property
    def solver_id(self) -> str:
        return self.solver["id"]

    def check_names(self) -> list[str]:
        names = self.checks.get("names", "all")
        if names == "all":
            return available_checks(self.solver_id)
        if isinstance(names, str):
            names = [names]
        return list(names)

    def validate(self) -> None:
        sid = self.solver.get("id")
        if sid not in SOLVERS:
            raise ConfigError(f"unknown solver {sid!r}; expected one of {', '.join(SOLVERS)}")
        kind = self.instance.get("kind")
        if kind not in ("garnet", "garnet_ssp", "layered_ssp", "file"):
            raise ConfigError(f"unknown instance kind {kind!r}")
        k_max = self.solver.get("k_max")
        if k_max is not None and (not isinstance(k_max, int) or k_max < 1):
            raise ConfigError(f"solver.k_max must be a positive integer, got {k_max!r}")
        beta = self.solver.get("beta")
        if beta is not None and not 0.0 < float(beta) <= 1.0:
            raise ConfigError(f"solver.beta must lie in (0, 1], got {beta}")
        if sid in ("npg", "npg-lfa", "npg-ssp", "dpi") and not 0.0 < float(beta) < 1.0:
            raise ConfigError(f"solver.beta must lie in (0, 1) for {sid}, got {beta}")
        if "nu" in self.solver:
            Regularizer.from_key(self.solver["nu"])
        names = self.check_names()
        registry = available_checks()
        unknown = [n for n in names if n not in registry]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; available checks: {', '.join(sorted(registry))}")
        applicable = available_checks(sid)
        wrong = [n for n in names if n not in applicable]
        if wrong:
            raise ConfigError(
                f"checks {wrong} do not apply to solver {sid!r}; applicable: {', '.join(applicable)}"
            )
        ssp_instance = kind in ("garnet_ssp", "layered_ssp")
        if ssp_instance and sid not in SSP_SOLVERS:
            raise ConfigError(f"instance kind {kind!r} needs an SSP solver, got {sid!r}")
        if kind in ("garnet",) and sid in SSP_SOLVERS:
            raise ConfigError(f"solver {sid!r} needs an SSP instance")
        if kind == "file" and not self.instance.get("path"):
            raise ConfigError("instance.path is required for kind = 'file'")

    def output_dir(self) -> Path | None:
        d = self.output.get("dir")
        if d is None:
            return None
        d = Path(d)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not d.is_absolute():
            d = Path(root) / d
        return d


def build_instance(cfg: ExperimentConfig):
    inst = cfg.instance
    kind = inst["kind"]
    try:
        if kind == "file":
            path = inst["path"]
            doc = json.loads(Path(path).read_text())
            if "gamma" in doc:
                return TabularMdp.from_dict(doc)
            return SspMdp.from_dict(doc)
        if kind == "layered_ssp":
            return generate_layered_ssp(
                int(inst.get("layers", 4)), int(inst.get("width", 2)), int(inst["m"]), int(inst.get("seed", 0)),
                int(inst.get("branching", 2)),
            )
        spec = GarnetSpec(
            int(inst["n"]), int(inst["m"]), int(inst.get("branching", inst["n"])), float(inst.get("gamma", 0.9)),
            int(inst.get("seed", 0)),
        )
        if kind == "garnet_ssp":
            return generate_garnet_ssp(spec, float(inst.get("termination_prob", 0.2)))
        return generate_garnet(spec)
    except KeyError as exc:
        raise ConfigError(f"instance config is missing {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read instance file: {exc}") from None


def build_features(cfg: ExperimentConfig, n: int, m: int):
    f = cfg.features
    kind = f.get("kind", "gaussian")
    if kind == "identity":
        return identity_features(n, m)
    if kind == "gaussian":
        return gaussian_features(n, m, int(f.get("d", 4)), int(f.get("seed", 0)))
    if kind == "tile":
        return tile_features(n, m, int(f.get("group", 2)))
    if kind == "constant":
        return constant_features(n, m)
    if kind == "file":
        return load_features(f["path"], n, m)
    raise ConfigError(f"unknown feature kind {kind!r}; expected identity, gaussian, tile, constant or file")


def _schedule(s: dict) -> StepsizeSchedule:
    kind = s.get("schedule", "constant_after_one")
    if kind == "constant_after_one":
        return StepsizeSchedule.constant_after_one(float(s.get("beta", 0.5)))
    if kind == "nonsummable":
        return StepsizeSchedule.nonsummable(float(s.get("power", 1.0)))
    if kind == "custom":
        return StepsizeSchedule.custom(s.get("betas", []))
    raise ConfigError(f"unknown schedule {kind!r}")


def _tau(s: dict, m: int) -> float:
    if "tau" in s:
        return float(s["tau"])
    return 1.0 / math.log(m) if m > 1 else 1.0


def run_solver(cfg: ExperimentConfig, instance, features=None) -> SolverTrace:
    s = cfg.solver
    sid = s["id"]
    k_max = s.get("k_max")
    tie = s.get("tie_break", "lowest")
    if sid == "pi":
        return run_pi(instance, k_max, tie_break=tie)
    if sid == "vi":
        return run_vi(instance, k_max)
    if sid == "dspi":
        return run_dspi(instance, s.get("nu", "entropy"), _tau(s, instance.m), _schedule(s), k_max, tie_break=tie)
    if sid == "pda":
        return run_pda(instance, _tau(s, instance.m), float(s.get("beta", 0.5)), k_max, tie_break=tie)
    if sid == "npg":
        return run_npg(instance, s.get("alpha0"), float(s.get("beta", 0.5)), k_max, mode=s.get("mode", "normalized"))
    if sid == "dpi":
        trace, _ = run_dual_averaged_pi(instance, float(s.get("beta", 0.5)), k_max, tie_break=tie)
        return trace
    rho = cfg.features.get("rho")
    if sid == "dspi-lfa":
        return run_dspi_lfa(instance, features, rho, s.get("nu", "entropy"), _tau(s, instance.m), _schedule(s), k_max)
    if sid == "npg-lfa":
        return run_npg_lfa(instance, features, rho, s.get("alpha0"), float(s.get("beta", 0.5)), k_max)
    if sid == "dspi-ssp":
        return run_dspi_ssp(instance, s.get("nu", "entropy"), _tau(s, instance.m), _schedule(s), k_max)
    return run_npg_ssp(instance, s.get("alpha0"), float(s.get("beta", 0.5)), k_max)


@dataclass
class Report:
    solver: str
    config: dict
    checks: list[CheckResult]
    instance: dict
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "solver": self.solver,
            "passed": self.passed,
            "instance": self.instance,
            "config": self.config,
            "checks": [c.to_dict() for c in self.checks],
            "notes": list(self.notes),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, default=_json_default))

    def summary_lines(self) -> list[str]:
        lines = []
        for c in self.checks:
            slack = "n/a" if c.max_slack is None else f"{c.max_slack:.3e}"
            lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name:28s} max_slack={slack} worst_k={c.worst_k}")
        return lines


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


@dataclass
class ExperimentResult:
    report: Report
    trace: SolverTrace
    instance: Any


def _instance_summary(instance) -> dict:
    out = {"type": "ssp" if isinstance(instance, SspMdp) else "mdp", "n": instance.n, "m": instance.m}
    if isinstance(instance, TabularMdp):
        out["gamma"] = instance.gamma
    else:
        out["kappa"] = instance.weighted_norm.kappa
    return out


def run_experiment(cfg: ExperimentConfig | dict, write: bool = True) -> ExperimentResult:
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    instance = build_instance(cfg)
    if isinstance(instance, SspMdp) != (cfg.solver_id in SSP_SOLVERS):
        raise ConfigError(f"solver {cfg.solver_id!r} does not match the instance type")
    features = None
    if cfg.solver_id in ("dspi-lfa", "npg-lfa"):
        features = build_features(cfg, instance.n, instance.m)
    trace = run_solver(cfg, instance, features)
    settings = dict(cfg.checks)
    settings.pop("names", None)
    settings.setdefault("seed", cfg.instance.get("seed", 0))
    if features is not None:
        settings["features"] = features
        settings["rho"] = cfg.features.get("rho")
    ctx = CheckContext(trace, instance, settings)
    checks = run_checks(cfg.check_names(), ctx)
    report = Report(cfg.solver_id, cfg.to_dict(), checks, _instance_summary(instance), list(trace.notes))
    out = cfg.output_dir()
    if write and out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace.to_csv(out / "trace.csv")
        trace.to_json(out / "trace.json")
        report.to_json(out / "report.json")
    return ExperimentResult(report, trace, instance)


SWEEP_COLUMNS = ("index", "gamma", "beta", "n", "m", "seed", "first_k", "budget", "within_budget", "checks_passed")


@dataclass
class SweepReport:
    eps: float
    cells: list[dict]

    @property
    def passed(self) -> bool:
        return all(c["within_budget"] and c["checks_passed"] for c in self.cells)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for c in self.cells:
                w.writerow(c)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "eps": self.eps, "passed": self.passed, "cells": self.cells}


def _sweep_cell(args) -> dict:
    index, doc, eps = args
    res = run_experiment(ExperimentConfig.from_dict(doc), write=False)
    gamma = res.instance.gamma
    first = next((r.k for r in res.trace if r.v_gap <= eps), None)
    budget = bounds.complexity_budget(gamma, eps)
    return {
        "index": index,
        "gamma": gamma,
        "beta": doc["solver"].get("beta"),
        "n": res.instance.n,
        "m": res.instance.m,
        "seed": doc["instance"].get("seed"),
        "first_k": first,
        "budget": budget,
        "within_budget": first is not None and first <= budget,
        "checks_passed": res.report.passed,
        "checks": [c.to_dict() for c in res.report.checks],
    }


def expand_grid(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid must name at least one parameter with at least one value")
    bad = [k for k in grid if k not in GRID_KEYS]
    if bad:
        raise ConfigError(f"unsupported grid keys {bad}; expected a subset of {sorted(GRID_KEYS)}")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(base: ExperimentConfig | dict, grid: dict, eps: float = 1e-3, workers: int = 1) -> SweepReport:
    """Run every grid cell and compare the first k reaching eps with the iteration budget.

    Cells are independent; results are ordered by grid index whatever the
    completion order.
    """
    base_doc = base.to_dict() if isinstance(base, ExperimentConfig) else _merge(DEFAULTS, base)
    if base_doc["instance"].get("kind") not in ("garnet", "file"):
        raise ConfigError("sweeps run on discounted instances")
    jobs = []
    for i, cell in enumerate(expand_grid(grid)):
        doc = copy.deepcopy(base_doc)
        doc["output"] = {"dir": None}
        for key, value in cell.items():
            section, name = GRID_KEYS[key]
            doc[section][name] = value
        # long enough to reach eps within the budget being tested
        budget = bounds.complexity_budget(float(doc["instance"].get("gamma", 0.9)), eps)
        doc["solver"]["k_max"] = max(int(doc["solver"].get("k_max") or 0), budget)
        ExperimentConfig.from_dict(doc)  # fail fast on invalid cells
        jobs.append((i, doc, eps))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    return SweepReport(eps, cells)


"""Per-iteration solver traces and their CSV/JSON export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

CSV_COLUMNS = ("k", "v_gap", "qbar_gap", "envelope", "eta", "beta")
TRACE_SCHEMA_VERSION = "1.0"


@dataclass
class IterationRecord:
    """State of a run at iteration k.

    ``qbar`` is the running average *before* Q^{pi_k} is folded in (so
    ``qbar`` at k = 0 is zero), ``beta`` is the weight given to Q^{pi_k} when
    forming the next average, and ``eta`` is the smoothing weight used to
    produce pi_{k+1}. ``target`` is what was averaged: Q^{pi_k} in the tabular
    case, the fitted W_k* under function approximation.
    """

    k: int
    policy: np.ndarray
    q_pi: np.ndarray
    qbar: np.ndarray
    beta: float
    eta: float
    v_gap: float = math.nan
    qbar_gap: float = math.nan
    envelope: float = math.nan
    wallclock: float = 0.0
    target: np.ndarray | None = None
    eps: float = math.nan
    greedy_floor: bool = False
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class SolverTrace:
    solver: str
    params: dict[str, Any]
    records: list[IterationRecord] = field(default_factory=list)
    gamma: float | None = None
    nu_max: float = 0.0
    tau: float = 0.0
    q_star: np.ndarray | None = None
    v_star: np.ndarray | None = None
    gap0: float = math.nan
    notes: list[str] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, k):
        return self.records[k]

    def __iter__(self):
        return iter(self.records)

    @property
    def policies(self) -> list[np.ndarray]:
        return [r.policy for r in self.records]

    @property
    def v_gaps(self) -> np.ndarray:
        return np.array([r.v_gap for r in self.records])

    @property
    def final_policy(self) -> np.ndarray:
        return self.records[-1].policy

    def rows(self) -> list[dict[str, float]]:
        return [{c: getattr(r, c) for c in CSV_COLUMNS} for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(float(v)) if k != "k" else int(v) for k, v in row.items()})

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        records = []
        for r in self.records:
            rec = {
                "k": r.k,
                "policy": arr(r.policy),
                "q_pi": arr(r.q_pi),
                "qbar": arr(r.qbar),
                "beta": _num(r.beta),
                "eta": _num(r.eta),
                "v_gap": _num(r.v_gap),
                "qbar_gap": _num(r.qbar_gap),
                "envelope": _num(r.envelope),
                "eps": _num(r.eps),
                "greedy_floor": r.greedy_floor,
            }
            if r.target is not None:
                rec["target"] = arr(r.target)
            if include_timing:
                rec["wallclock"] = r.wallclock
            records.append(rec)
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "solver": self.solver,
            "params": _jsonable(self.params),
            "gamma": self.gamma,
            "nu_max": self.nu_max,
            "tau": self.tau,
            "gap0": _num(self.gap0),
            "q_star": arr(self.q_star),
            "v_star": arr(self.v_star),
            "notes": list(self.notes),
            "meta": _jsonable(self.meta),
            "records": records,
        }

    def to_json(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_timing), indent=1))


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if hasattr(obj, "key"):
        return obj.key
    return obj

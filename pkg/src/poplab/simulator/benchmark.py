"""Closed-loop benchmark: roll predictor variants over a scenario suite
and tabulate driving quality.

DIST/JERK/RC aggregate as means over (scenario, seed) runs; CT and RCT
are event counts and aggregate as sums.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from .closedloop import run_scenario
from .planner import SimConfig
from .scoring import SimMetrics, score_scenario

BENCHMARK_COLUMNS = ("Method", "P-K", "DIST", "JERK", "RC", "CT", "RCT")


@dataclass
class BenchmarkRow:
    method: str
    k_plan: int
    scenario: str
    seed: int
    metrics: SimMetrics


def run_benchmark(scenarios, predictors: dict, config: SimConfig,
                  seeds=(0,), trace_hook=None) -> list:
    """Cross product of predictors x scenarios x seeds -> BenchmarkRows.

    ``predictors`` maps method name -> predictor; ``trace_hook``, if
    given, is called with every finished ScenarioTrace (used for
    persistence and replay checks).
    """
    if not predictors:
        raise ParameterError("need at least one predictor")
    rows = []
    for method in sorted(predictors):
        pred = predictors[method]
        for scenario in scenarios:
            for seed in seeds:
                trace = run_scenario(scenario, pred, config, seed=seed)
                if trace_hook is not None:
                    trace_hook(method, trace)
                rows.append(BenchmarkRow(
                    method=method, k_plan=config.k_plan,
                    scenario=scenario.name, seed=seed,
                    metrics=score_scenario(trace, config)))
    return rows


def aggregate(rows) -> list:
    """One summary dict per (method, k_plan), in sorted method order."""
    keys = sorted({(r.method, r.k_plan) for r in rows})
    out = []
    for method, k in keys:
        grp = [r.metrics for r in rows
               if r.method == method and r.k_plan == k]
        out.append({
            "Method": method,
            "P-K": k,
            "DIST": float(np.mean([m.dist for m in grp])),
            "JERK": float(np.mean([m.jerk for m in grp])),
            "RC": float(np.mean([m.rc for m in grp])),
            "CT": int(sum(m.ct for m in grp)),
            "RCT": int(sum(m.rct for m in grp)),
        })
    return out


def write_benchmark_csv(rows, path: str) -> None:
    table = aggregate(rows)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(BENCHMARK_COLUMNS)
            for row in table:
                w.writerow([
                    row["Method"], row["P-K"],
                    f"{row['DIST']:.3f}", f"{row['JERK']:.4f}",
                    f"{row['RC']:.4f}", row["CT"], row["RCT"],
                ])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_benchmark_csv(path: str) -> list:
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != BENCHMARK_COLUMNS:
            raise ParameterError(f"unexpected benchmark header: {header}")
        out = []
        for rec in reader:
            out.append({
                "Method": rec[0], "P-K": int(rec[1]),
                "DIST": float(rec[2]), "JERK": float(rec[3]),
                "RC": float(rec[4]), "CT": int(rec[5]),
                "RCT": int(rec[6]),
            })
        return out

"""Replication harness: simulate, screen, detect and summarize TDR/FDR.

Every replication draws its data from ``replication_seed(scenario.seed, rep)``
alone, so tables do not depend on the number of worker processes or the
order in which replications finish.
"""
import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_open, read_json
from .errors import InvalidInput, PanelcpError
from .panel import SimulationScenario, replication_seed, simulate_panel, standardize_and_stack
from .penalties import PenaltySpec
from .screen import DTCCS, ScreeningParams, screen
from .segment import build_cumulative_design, detect_change_points

log = logging.getLogger(__name__)

TABLE_COLUMNS = [
    "scenario_id", "N", "T", "p", "stage", "method", "penalty", "tdr", "fdr",
    "mean_true", "sd_true", "mean_irrelevant", "sd_irrelevant", "failed_reps",
    "fdr_indicator", "mean_irrelevant_res_n", "sd_irrelevant_res_n", "status",
]
FAIL_FRACTION = 0.10


@dataclass(frozen=True)
class Scenario:
    """One row group of the benchmark.

    Screening runs once per method in ``methods``; detection runs on the
    output of every method in ``detect_methods`` with every penalty in
    ``penalties``.  ``detect_options`` are passed to ``detect_change_points``.
    """

    scenario_id: str
    panel: SimulationScenario
    n_reps: int = 50
    seed: int = 0
    methods: tuple = (DTCCS,)
    screen_params: ScreeningParams = field(default_factory=ScreeningParams)
    keep: int = None
    penalties: tuple = ("lasso", "scad", "mcp")
    a: dict = field(default_factory=dict)
    detect_methods: tuple = (DTCCS,)
    detect_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_reps < 1:
            raise InvalidInput("n_reps must be >= 1")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "penalties", tuple(str(k).lower() for k in self.penalties))
        object.__setattr__(self, "detect_methods", tuple(self.detect_methods))
        for k in self.penalties:
            PenaltySpec(k, 0.0, self.a.get(k))
        missing = set(self.detect_methods) - set(self.methods)
        if self.penalties and missing:
            raise InvalidInput(f"detection needs screening methods {sorted(missing)}")


def screening_metrics(selected, truth):
    """Per-replication screening record for 1-based covariate ids."""
    selected, truth = set(selected), set(truth)
    if not truth:
        raise InvalidInput("truth must be non-empty")
    extra = len(selected - truth)
    return {
        "success": int(truth <= selected),
        "fdr": extra / max(1, len(selected)),
        "fdr_indicator": int(extra > 0),
        "true": len(selected & truth),
        "irrelevant": extra,
    }


def changepoint_metrics(detected, truth, first_block_nonzero=True):
    """Per-replication detection record for 1-based change times.

    ``irrelevant_res_n`` also counts the always-present first block as a
    detection outside the truth.
    """
    detected, truth = set(detected), set(truth)
    extra = len(detected - truth)
    return {
        "success": int(truth <= detected),
        "fdr": extra / max(1, len(detected)),
        "fdr_indicator": int(extra > 0),
        "true": len(detected & truth),
        "irrelevant": extra,
        "irrelevant_res_n": extra + int(bool(first_block_nonzero)),
    }


def run_replication(scenario, rep):
    """All records of one replication; failures become records with ``error``."""
    seed = replication_seed(scenario.seed, rep)
    base = {"scenario_id": scenario.scenario_id, "rep": rep, "seed": seed}
    try:
        data, truth = simulate_panel(scenario.panel, seed)
        design = standardize_and_stack(data)
    except (PanelcpError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return [dict(base, stage="simulate", method="", penalty="", error=_err(exc))]
    records = []
    selections = {}
    for method in scenario.methods:
        rec = dict(base, stage="screen", method=method, penalty="")
        try:
            res = screen(design, method, scenario.screen_params, scenario.keep,
                         keep_trace=False)
        except (PanelcpError, np.linalg.LinAlgError, FloatingPointError) as exc:
            records.append(dict(rec, error=_err(exc)))
            continue
        ids = design.covariate_ids(res.active)
        selections[method] = res.active
        records.append(dict(rec, selected=list(ids),
                            **screening_metrics(ids, truth.true_covariates)))
    for method in scenario.detect_methods:
        for kind in scenario.penalties:
            rec = dict(base, stage="detect", method=method, penalty=kind)
            if method not in selections:
                records.append(dict(rec, error="screening failed"))
                continue
            try:
                cd = build_cumulative_design(design, selections[method])
                out = detect_change_points(cd, design.y_stacked, kind,
                                           scenario.a.get(kind), **scenario.detect_options)
            except (PanelcpError, np.linalg.LinAlgError, FloatingPointError) as exc:
                records.append(dict(rec, error=_err(exc)))
                continue
            first = bool(np.any(out.fit.theta[0] != 0))
            records.append(dict(rec, detected=list(out.change_points),
                                **changepoint_metrics(out.change_points,
                                                      truth.true_change_points, first)))
    return records


def _err(exc):
    return f"{type(exc).__name__}: {exc}"


def _run_task(task):
    scenario, rep = task
    return run_replication(scenario, rep)


def _mean_sd(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    sd = float(np.std(v, ddof=1)) if v.size > 1 else math.nan
    return float(np.mean(v)), sd


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple

    def to_csv_string(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path):
        with atomic_open(path, newline="") as fh:
            fh.write(self.to_csv_string())

    def find(self, scenario_id, stage, method, penalty=""):
        for row in self.rows:
            if (row["scenario_id"], row["stage"], row["method"], row["penalty"]) == (
                    scenario_id, stage, method, penalty):
                return row
        raise KeyError((scenario_id, stage, method, penalty))


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".10g")
    return str(v)


def summarize(scenarios, records):
    """Collapse per-replication records into one table row per (scenario, stage, method, penalty)."""
    by_key = {}
    for rec in records:
        key = (rec["scenario_id"], rec["stage"], rec["method"], rec["penalty"])
        by_key.setdefault(key, []).append(rec)
    rows = []
    for sc in scenarios:
        keys = [("screen", m, "") for m in sc.methods]
        keys += [("detect", m, k) for m in sc.detect_methods for k in sc.penalties]
        sim_failed = sum(1 for r in by_key.get((sc.scenario_id, "simulate", "", ""), []))
        for stage, method, kind in keys:
            recs = by_key.get((sc.scenario_id, stage, method, kind), [])
            ok = [r for r in recs if "error" not in r]
            failed = sc.n_reps - len(ok)
            mean_t, sd_t = _mean_sd([r["true"] for r in ok])
            mean_i, sd_i = _mean_sd([r["irrelevant"] for r in ok])
            if stage == "detect":
                mean_r, sd_r = _mean_sd([r["irrelevant_res_n"] for r in ok])
            else:
                mean_r, sd_r = math.nan, math.nan
            row = {
                "scenario_id": sc.scenario_id, "N": sc.panel.n_subjects,
                "T": sc.panel.n_times, "p": sc.panel.n_covariates, "stage": stage,
                "method": method, "penalty": kind,
                "tdr": float(np.mean([r["success"] for r in ok])) if ok else math.nan,
                "fdr": float(np.mean([r["fdr"] for r in ok])) if ok else math.nan,
                "mean_true": mean_t, "sd_true": sd_t,
                "mean_irrelevant": mean_i, "sd_irrelevant": sd_i,
                "failed_reps": failed,
                "fdr_indicator": float(np.mean([r["fdr_indicator"] for r in ok])) if ok else math.nan,
                "mean_irrelevant_res_n": mean_r, "sd_irrelevant_res_n": sd_r,
                "status": "failed" if failed > FAIL_FRACTION * sc.n_reps else "ok",
            }
            if failed:
                log.warning("%s %s/%s/%s: %d of %d replications failed (%d in simulation)",
                            sc.scenario_id, stage, method, kind or "-", failed,
                            sc.n_reps, sim_failed)
            rows.append(row)
    return MetricsTable(tuple(rows))


def run_benchmark(scenarios, jobs=1, raw_path=None):
    """Run every replication of every scenario and summarize.

    Parameters
    ----------
    scenarios : list of Scenario
    jobs : int
        Worker processes; 1 runs in-process.
    raw_path : path, optional
        Per-replication records are written here as JSON lines.

    Returns
    -------
    (MetricsTable, list of dict)
    """
    scenarios = list(scenarios)
    ids = [sc.scenario_id for sc in scenarios]
    if len(set(ids)) != len(ids):
        raise InvalidInput("scenario ids must be unique")
    if jobs < 1:
        raise InvalidInput("jobs must be >= 1")
    tasks = [(sc, r) for sc in scenarios for r in range(sc.n_reps)]
    if jobs == 1 or len(tasks) <= 1:
        chunks = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    records = [rec for chunk in chunks for rec in chunk]
    if raw_path is not None:
        write_jsonl(raw_path, records)
    return summarize(scenarios, records), records


def write_jsonl(path, records):
    with atomic_open(path) as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def scenario_from_dict(item, defaults=None):
    """Build a ``Scenario`` from a grid entry; ``defaults`` fill missing keys."""
    d = dict(defaults or {})
    d.update(item)
    try:
        N, T, p = int(d["N"]), int(d["T"]), int(d["p"])
    except KeyError as exc:
        raise InvalidInput(f"grid entry misses {exc.args[0]!r}") from None
    seed = int(d.get("seed", 0))
    panel = SimulationScenario(
        N, T, p,
        signal_high=float(d.get("signal_high", 7.0)),
        signal_low=float(d.get("signal_low", 2.0)),
        signal_const=float(d.get("signal_const", 5.0)),
        noise_sd=float(d.get("noise_sd", 1.0)),
        seed=seed,
    )
    sp = dict(d.get("screen", {}))
    if "lambda0_schedule" in sp and not isinstance(sp["lambda0_schedule"], str):
        sp["lambda0_schedule"] = tuple(float(v) for v in sp["lambda0_schedule"])
    try:
        params = ScreeningParams(**sp)
    except TypeError as exc:
        raise InvalidInput(f"bad screening parameters: {exc}") from None
    methods = tuple(d.get("methods", (DTCCS,)))
    return Scenario(
        scenario_id=str(d.get("id", f"N{N}_T{T}_p{p}")),
        panel=panel,
        n_reps=int(d.get("reps", 50)),
        seed=seed,
        methods=methods,
        screen_params=params,
        keep=d.get("keep"),
        penalties=tuple(d.get("penalties", ("lasso", "scad", "mcp"))),
        a={str(k).lower(): float(v) for k, v in dict(d.get("a", {})).items()},
        detect_methods=tuple(d.get("detect_methods", (DTCCS,) if DTCCS in methods else ())),
        detect_options=dict(d.get("detect", {})),
    )


def load_grid(path, reps=None, seed=None):
    """Read a grid JSON: a list of entries or ``{"defaults": {...}, "scenarios": [...]}``.

    ``reps`` and ``seed`` override every entry when given.
    """
    try:
        doc = read_json(path)
    except FileNotFoundError:
        raise InvalidInput(f"grid file not found: {os.fspath(path)}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"grid file is not valid JSON: {exc}") from None
    if isinstance(doc, list):
        defaults, items = {}, doc
    elif isinstance(doc, dict) and "scenarios" in doc:
        defaults, items = dict(doc.get("defaults", {})), doc["scenarios"]
    else:
        raise InvalidInput("grid must be a list or an object with 'scenarios'")
    if not items:
        raise InvalidInput("grid has no scenarios")
    out = []
    for item in items:
        if reps is not None:
            item = dict(item, reps=reps)
        if seed is not None:
            item = dict(item, seed=seed)
        out.append(scenario_from_dict(item, defaults))
    return out

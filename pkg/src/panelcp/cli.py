"""Command line entry point: ``panelcp {simulate,screen,detect,pipeline,bench}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

Parameter values come from command-line flags, then from the ``--config``
JSON file (top-level keys, or keys under the subcommand name), then from
``DEFAULTS``.
"""
import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_open, read_json, write_json
from .bench import load_grid, run_benchmark
from .errors import DataError, InvalidInput, NumericalError
from .panel import SimulationScenario, load_panel_csv, simulate_panel, standardize_and_stack, write_panel_csv
from .screen import DTCCS, HOLP, SIS, ScreeningParams, screen
from .segment import build_cumulative_design, detect_change_points

log = logging.getLogger("panelcp")

JOBS_ENV = "PANELCP_JOBS"

DEFAULTS = {
    # simulate
    "N": 20, "T": 20, "p": 30, "seed": 0, "signal_high": 7.0, "signal_low": 2.0,
    "signal_const": 5.0, "noise_sd": 1.0,
    # screen
    "method": DTCCS, "d": None, "K": 10, "cap": None, "lambda0": "auto",
    "ridge_active": 1.0, "gic_hn": None, "keep": None,
    # detect
    "penalty": "mcp", "a": None, "n_lambdas": 50, "min_ratio": 1e-3, "gamma": 0.5,
    "zero_tol": 1e-6, "penalize_first_block": False, "group_norm": "orthonormal",
    "penalty_weight": None, "ebic_rss": "refit", "tol": 1e-7, "max_sweeps": 10000,
    # bench
    "reps": None, "jobs": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON file with parameter values")
    p.add_argument("--json", action="store_true", help="echo the result as JSON on stdout")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_screen_flags(p):
    g = p.add_argument_group("screening")
    g.add_argument("--method", choices=[DTCCS, SIS, HOLP])
    g.add_argument("--d", type=int, help="covariates picked per DTCCS iteration")
    g.add_argument("--K", type=int, help="maximum number of DTCCS iterations")
    g.add_argument("--cap", type=int, help="maximum number of selected covariates")
    g.add_argument("--lambda0", help="'auto' (knots) or a comma list, 'inf' allowed")
    g.add_argument("--ridge-active", type=float)
    g.add_argument("--gic-hn", help="'consistent', 'plain' or a number")
    g.add_argument("--keep", type=int, help="SIS/HOLP model size")


def _add_detect_flags(p):
    g = p.add_argument_group("detection")
    g.add_argument("--penalty", choices=["lasso", "scad", "mcp"])
    g.add_argument("--a", type=float, help="SCAD/MCP concavity")
    g.add_argument("--n-lambdas", type=int)
    g.add_argument("--min-ratio", type=float)
    g.add_argument("--gamma", type=float, help="eBIC model-size weight")
    g.add_argument("--zero-tol", type=float)
    g.add_argument("--penalize-first-block", action="store_true", default=None)
    g.add_argument("--group-norm", choices=["orthonormal", "identity"])
    g.add_argument("--penalty-weight", help="number or '1/T'")
    g.add_argument("--ebic-rss", choices=["refit", "penalized"])
    g.add_argument("--tol", type=float)
    g.add_argument("--max-sweeps", type=int)


def build_parser():
    parser = _Parser(prog="panelcp", description=(
        "Covariate screening and change-point detection for panel regression."))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic panel and its ground truth")
    for name in ("N", "T", "p", "seed"):
        p.add_argument(f"--{name}", type=int)
    for name in ("signal-high", "signal-low", "signal-const", "noise-sd"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--out", "--output", dest="out", required=True)
    p.add_argument("--truth", help="ground-truth JSON path (default: <out>.truth.json)")
    _add_common(p)

    p = sub.add_parser("screen", help="select covariates")
    p.add_argument("--input", required=True)
    p.add_argument("--output", "--out", dest="output")
    _add_screen_flags(p)
    _add_common(p)

    p = sub.add_parser("detect", help="detect change points on screened covariates")
    p.add_argument("--input", required=True)
    p.add_argument("--active", required=True, help="screening JSON (or comma list of ids)")
    p.add_argument("--output", "--out", dest="output")
    _add_detect_flags(p)
    _add_common(p)

    p = sub.add_parser("pipeline", help="screen with DTCCS then detect change points")
    p.add_argument("--input", required=True)
    p.add_argument("--output", "--out", dest="output")
    _add_screen_flags(p)
    _add_detect_flags(p)
    _add_common(p)

    p = sub.add_parser("bench", help="run a scenario grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help=f"worker processes (default ${JOBS_ENV} or 1)")
    p.add_argument("--out", "--output", dest="out", required=True)
    p.add_argument("--raw", help="per-replication JSON lines")
    _add_common(p)
    return parser


class _Settings:
    """Flag > config file > default lookup."""

    def __init__(self, args):
        self.args = args
        self.config = {}
        if getattr(args, "config", None):
            try:
                doc = read_json(args.config)
            except FileNotFoundError:
                raise InvalidInput(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"config file is not valid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise InvalidInput("config must be a JSON object")
            self.config = {k: v for k, v in doc.items() if not isinstance(v, dict)}
            self.config.update(doc.get(args.command, {}))

    def __getitem__(self, key):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        if key in self.config:
            return self.config[key]
        return DEFAULTS.get(key)


def _check_input(path):
    if not Path(path).is_file():
        raise InvalidInput(f"input file not found: {path}")


def _check_output(path):
    if path is None:
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise InvalidInput(f"output directory does not exist: {parent}")


def _parse_lambda0(v):
    if v is None or v == "auto" or v == "knots":
        return "knots"
    if isinstance(v, (list, tuple)):
        return tuple(float(u) for u in v)
    try:
        return tuple(float(u) for u in str(v).split(","))
    except ValueError:
        raise InvalidInput(f"bad lambda0 list {v!r}") from None


def _parse_hn(v):
    if v is None or v in ("consistent", "plain"):
        return v
    try:
        return float(v)
    except ValueError:
        raise InvalidInput(f"bad gic_hn {v!r}") from None


def _screening_params(s):
    return ScreeningParams(pick_per_iter=s["d"], max_iters=int(s["K"]), cap_m=s["cap"],
                           lambda0_schedule=_parse_lambda0(s["lambda0"]),
                           ridge_active=float(s["ridge_active"]), gic_hn=_parse_hn(s["gic_hn"]))


def _detect_kwargs(s):
    return dict(kind=s["penalty"], a=s["a"], n_lambdas=int(s["n_lambdas"]),
                min_ratio=float(s["min_ratio"]), gamma=float(s["gamma"]),
                zero_tol=float(s["zero_tol"]),
                penalize_first_block=bool(s["penalize_first_block"]),
                tol=float(s["tol"]), max_sweeps=int(s["max_sweeps"]),
                group_norm=s["group_norm"], penalty_weight=s["penalty_weight"],
                ebic_rss=s["ebic_rss"])


def _emit(args, path, doc):
    if path is not None:
        write_json(path, doc)
    if args.json:
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")


def _truth_path(out):
    out = Path(out)
    return out.with_name(out.stem + ".truth.json")


def cmd_simulate(args, s):
    _check_output(args.out)
    sc = SimulationScenario(int(s["N"]), int(s["T"]), int(s["p"]),
                            signal_high=float(s["signal_high"]),
                            signal_low=float(s["signal_low"]),
                            signal_const=float(s["signal_const"]),
                            noise_sd=float(s["noise_sd"]), seed=int(s["seed"]))
    data, truth = simulate_panel(sc)
    truth_path = args.truth or _truth_path(args.out)
    _check_output(truth_path)
    write_panel_csv(data, args.out)
    doc = truth.to_json()
    write_json(truth_path, doc)
    if args.json:
        _emit(args, None, dict(doc, output=str(args.out), truth=str(truth_path)))


def _load_design(path):
    _check_input(path)
    return standardize_and_stack(load_panel_csv(path))


def _screen_doc(design, s):
    params = _screening_params(s)
    res = screen(design, s["method"], params, s["keep"])
    extra = {"method": s["method"]}
    if s["method"] == DTCCS:
        extra.update(K=params.max_iters, lambda0=s["lambda0"], ridge_active=params.ridge_active)
    else:
        extra["keep"] = res.info.get("keep", s["keep"])
    return res, res.to_json(design, extra)


def cmd_screen(args, s):
    _check_output(args.output)
    design = _load_design(args.input)
    _, doc = _screen_doc(design, s)
    _emit(args, args.output, doc)


def _active_ids(spec):
    if Path(spec).is_file():
        try:
            doc = read_json(spec)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"active file is not valid JSON: {exc}") from None
        ids = doc.get("active") if isinstance(doc, dict) else doc
        if not isinstance(ids, list):
            raise InvalidInput("active file has no 'active' list")
        return [int(v) for v in ids]
    if all(part.strip().isdigit() for part in spec.split(",")):
        return [int(v) for v in spec.split(",")]
    raise InvalidInput(f"active set not found: {spec}")


def cmd_detect(args, s):
    _check_output(args.output)
    design = _load_design(args.input)
    cols = design.columns_for_ids(_active_ids(args.active))
    cd = build_cumulative_design(design, cols)
    out = detect_change_points(cd, design.y_stacked, **_detect_kwargs(s))
    _emit(args, args.output, out.to_json(design))


def cmd_pipeline(args, s):
    _check_output(args.output)
    design = _load_design(args.input)
    res, sdoc = _screen_doc(design, dict_view(s, method=DTCCS))
    cd = build_cumulative_design(design, res.active)
    out = detect_change_points(cd, design.y_stacked, **_detect_kwargs(s))
    doc = out.to_json(design)
    doc["screening"] = {k: sdoc[k] for k in ("method", "active", "params")}
    _emit(args, args.output, doc)


class dict_view:
    """Settings with a few keys pinned."""

    def __init__(self, base, **pinned):
        self.base, self.pinned = base, pinned

    def __getitem__(self, key):
        return self.pinned[key] if key in self.pinned else self.base[key]


def _jobs(s):
    v = s["jobs"]
    if v is None:
        env = os.environ.get(JOBS_ENV)
        if env:
            try:
                v = int(env)
            except ValueError:
                raise UsageError(f"{JOBS_ENV} must be an integer, got {env!r}") from None
        else:
            v = 1
    if int(v) < 1:
        raise UsageError("jobs must be >= 1")
    return int(v)


def cmd_bench(args, s):
    _check_output(args.out)
    _check_output(args.raw)
    _check_input(args.grid)
    jobs = _jobs(s)
    scenarios = load_grid(args.grid, reps=s["reps"], seed=args.seed)
    table, _ = run_benchmark(scenarios, jobs=jobs, raw_path=args.raw)
    table.write_csv(args.out)
    if args.json:
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                 for k, v in row.items()} for row in table.rows]
        _emit(args, None, {"rows": rows})


COMMANDS = {"simulate": cmd_simulate, "screen": cmd_screen, "detect": cmd_detect,
            "pipeline": cmd_pipeline, "bench": cmd_bench}


def run(argv=None):
    """Run the command line and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"panelcp: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(all="ignore"):
            COMMANDS[args.command](args, _Settings(args))
    except UsageError as exc:
        print(f"panelcp: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"panelcp: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"panelcp: numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


def main():
    sys.exit(run())

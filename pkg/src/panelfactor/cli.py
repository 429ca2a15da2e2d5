"""Command-line front end.

Subcommands
-----------
``impute``
    fit the factor model to a panel with missing entries and write
    ``completed.csv`` (wide), ``se.csv`` (standard errors of the imputed
    cells, empty at observed cells), ``intervals.csv`` (long, one row per
    imputed cell) and ``model.json``.
``test-treatment``
    fit the control model given an adoption schedule and write
    ``effects.csv`` with the individual, average and ``Z``-weighted tests.
``simulate``
    run a bundled or user scenario and write ``reports.csv``,
    ``reports.json`` and, with ``--hist-bins``, ``histograms.json``.

Exit codes: 0 on success, 2 on data or configuration errors (the error class
name is printed), 1 on anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .csvio import (
    read_covariates,
    read_matrix,
    read_panel,
    read_schedule,
    read_table,
    write_table,
    write_wide,
)
from .errors import InputFormatError, PanelDataError
from .factor_est import fit, impute
from .inference import PanelInference
from .panel_core import MaskedPanel, compute_omega_weights, compute_overlap
from .propensity import (
    CovariateVector,
    estimate_constant,
    estimate_discrete_freq,
    estimate_logit_per_t,
    estimate_logit_pooled,
    propensity_from_matrix,
)
from .simulate import load_scenario, run_monte_carlo
from .treatment import (
    TreatmentPanel,
    control_panel,
    test_average,
    test_individual,
    test_weighted,
    treated_periods,
)

__all__ = ["main", "build_parser", "config_hash"]

PROPENSITY_CHOICES = ("discrete", "logit-pooled", "logit-per-t", "constant", "file")


def config_hash(config: dict) -> str:
    """First 12 hex digits of the SHA-256 of the canonical JSON config."""
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _header(config: dict) -> str:
    return f"# panelfactor {__version__} config={config_hash(config)}"


def _config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func")}


def _rank(text: str):
    if text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("rank must be a positive integer or 'auto'") from None
    if value < 1:
        raise argparse.ArgumentTypeError("rank must be a positive integer or 'auto'")
    return value


def _level(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return value


def _add_estimation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="panel CSV")
    p.add_argument("--format", choices=("wide", "long"), default="wide")
    p.add_argument("--rank", type=_rank, default="auto", help="number of factors or 'auto'")
    p.add_argument("--estimator", choices=("plain", "weighted"), default="plain")
    p.add_argument("--propensity", choices=PROPENSITY_CHOICES, default=None)
    p.add_argument("--propensity-file", default=None, help="wide CSV of probabilities for --propensity file")
    p.add_argument("--covariates", default=None, help="unit covariates CSV (unit_id, K columns)")
    p.add_argument("--min-overlap", type=int, default=None)
    p.add_argument("--variance", choices=("linearized", "closed_form"), default="linearized")
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelfactor", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"panelfactor {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impute", help="impute missing entries with standard errors")
    _add_estimation(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("test-treatment", help="test treatment effects given an adoption schedule")
    _add_estimation(p)
    p.add_argument("--schedule", required=True, help="CSV with unit_id,adopt_time (or NEVER)")
    p.add_argument("--tests", default="individual,average", help="comma list of individual, average")
    p.add_argument("--z-dir", default=None, help="directory with one Z matrix CSV per tested unit")
    p.add_argument("--units", default=None, help="comma list of unit ids to test (default: all treated)")
    p.add_argument("--alternative", choices=("two-sided", "greater", "less"), default="two-sided")
    p.add_argument("--no-null-imposed", dest="null_imposed", action="store_false")
    p.set_defaults(func=cmd_test_treatment)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    p.add_argument("--scenario", required=True, help="bundled scenario name or JSON path")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--level", type=_level, default=None)
    p.add_argument("--hist-bins", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _covariates(args, panel: MaskedPanel, discrete: bool) -> CovariateVector:
    if not args.covariates:
        raise InputFormatError(f"--propensity {args.propensity} needs --covariates")
    values, _ = read_covariates(args.covariates, panel.unit_ids)
    return CovariateVector.discrete(values) if discrete else CovariateVector(values)


def _propensity(args, panel: MaskedPanel):
    if args.estimator != "weighted":
        return None
    choice = args.propensity
    if choice is None:
        raise InputFormatError("the weighted estimator needs --propensity")
    if choice == "discrete":
        return estimate_discrete_freq(panel, _covariates(args, panel, True))
    if choice == "logit-pooled":
        return estimate_logit_pooled(panel, _covariates(args, panel, False))
    if choice == "logit-per-t":
        return estimate_logit_per_t(panel, _covariates(args, panel, False))
    if choice == "constant":
        return estimate_constant(panel)
    if not args.propensity_file:
        raise InputFormatError("--propensity file needs --propensity-file")
    probs = read_matrix(args.propensity_file, panel.unit_ids, panel.time_ids)
    return propensity_from_matrix(probs, panel)


def _fit(args, panel: MaskedPanel):
    prop = _propensity(args, panel)
    model = fit(
        panel,
        args.rank,
        weighted=args.estimator == "weighted",
        propensity=prop,
        min_overlap=args.min_overlap,
    )
    return model, prop


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_impute(args) -> int:
    from scipy.stats import norm

    config = _config(args)
    header = _header(config)
    panel = read_panel(args.input, args.format)
    model, prop = _fit(args, panel)
    imputed = impute(panel, model)
    inf = PanelInference(panel, model, prop, method=args.variance)
    missing = ~panel.observed
    se = inf.common_se(missing)
    out = _out_dir(args)
    write_wide(out / "completed.csv", imputed.completed, panel.unit_ids, panel.time_ids, header)
    write_wide(out / "se.csv", np.where(missing, se, np.nan), panel.unit_ids, panel.time_ids, header)
    z = norm.ppf(0.5 + args.level / 2)
    rows = []
    for i, t in np.argwhere(missing):
        est, s = imputed.common[i, t], se[i, t]
        rows.append((panel.unit_ids[i], panel.time_ids[t], est, s, est - z * s, est + z * s))
    write_table(out / "intervals.csv", ("unit", "time", "estimate", "se", "lower", "upper"), rows, header)
    omega = compute_omega_weights(panel, model.overlap or compute_overlap(panel, 1))
    _write_json(
        out / "model.json",
        {
            "version": __version__,
            "config": config,
            "config_hash": config_hash(config),
            "rank": model.rank,
            "weighted": model.weighted,
            "unit_ids": list(panel.unit_ids),
            "time_ids": list(panel.time_ids),
            "loadings": model.loadings,
            "factors": model.factors,
            "eigenvalues": model.eigenvalues,
            "factor_ok": model.factor_ok,
            "omega": {"omega_jj": omega.omega_jj, "omega_j": omega.omega_j, "omega": omega.omega},
            "sigma_e2": inf.moments.sigma_e2,
        },
    )
    return 0


def _read_z(path: Path, periods: np.ndarray, time_ids: Sequence) -> tuple:
    """Z matrix CSV: a header of column names and one row per treated
    period.  A leading ``time`` column, if present, must list the treated
    periods in order."""
    columns, rows = read_table(path)
    columns = [c.strip() for c in columns]
    if columns and columns[0].lower() == "time":
        expected = [str(time_ids[t]) for t in periods]
        got = [r[0].strip() for r in rows]
        if got != expected:
            raise InputFormatError(f"{path}: time column does not match the unit's treated periods")
        rows = [r[1:] for r in rows]
        columns = columns[1:]
    try:
        z = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError:
        raise InputFormatError(f"{path}: Z entries must be numeric") from None
    return z.reshape(len(rows), len(columns)), columns


def cmd_test_treatment(args) -> int:
    config = _config(args)
    header = _header(config)
    panel = read_panel(args.input, args.format)
    adopt = read_schedule(args.schedule, panel.unit_ids, panel.time_ids)
    tp = TreatmentPanel(panel.with_nan(), adopt)
    cpanel = control_panel(tp)
    cpanel = MaskedPanel(cpanel.values, cpanel.mask, panel.unit_ids, panel.time_ids)
    model, prop = _fit(args, cpanel)
    tests = {t.strip() for t in args.tests.split(",") if t.strip()}
    unknown = tests - {"individual", "average"}
    if unknown:
        raise InputFormatError(f"unknown tests {sorted(unknown)}")
    ids = list(panel.unit_ids)
    if args.units:
        wanted = [u.strip() for u in args.units.split(",")]
        missing = [u for u in wanted if u not in ids]
        if missing:
            raise InputFormatError(f"unknown unit ids {missing}")
        units = [ids.index(u) for u in wanted]
    else:
        units = list(np.flatnonzero(tp.ever_treated))
    kw = dict(null_imposed=args.null_imposed, alternative=args.alternative, propensity=prop)
    rows = []
    for i in units:
        uid = ids[i]
        try:
            periods = treated_periods(tp, model, i)
            if "individual" in tests:
                for t in periods:
                    r = test_individual(tp, model, i, t, **kw)
                    rows.append((uid, panel.time_ids[t], r.estimate, r.se, r.z_stat, r.p_value, r.null_imposed))
            if "average" in tests:
                r = test_average(tp, model, i, **kw)
                rows.append((uid, "avg", r.estimate, r.se, r.z_stat, r.p_value, r.null_imposed))
            if args.z_dir:
                zpath = Path(args.z_dir) / f"{uid}.csv"
                if zpath.is_file():
                    z, names = _read_z(zpath, periods, panel.time_ids)
                    r = test_weighted(tp, model, i, z, **kw)
                    for k, name in enumerate(names):
                        rows.append((uid, f"Z:{name}", r.estimate[k], r.se[k], r.z_stat[k], r.p_value[k], r.null_imposed))
        except PanelDataError as exc:
            print(f"warning: unit {uid}: {type(exc).__name__}: {exc}", file=sys.stderr)
    out = _out_dir(args)
    write_table(out / "effects.csv", ("unit", "target", "estimate", "se", "z", "p", "null_imposed"), rows, header)
    return 0


def cmd_simulate(args) -> int:
    config = _config(args)
    header = _header(config)
    scenario = load_scenario(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.reps is not None:
        changes["reps"] = args.reps
    if args.level is not None:
        changes["level"] = args.level
    if args.hist_bins is not None:
        changes["hist_bins"] = args.hist_bins
    scenario = replace(scenario, **changes)
    reports = run_monte_carlo(scenario, parallel_workers=args.workers)
    out = _out_dir(args)
    cols = ("scenario", "metric", "key", "value", "mc_se", "reps", "failures", "p_value")
    rows = [
        (r.scenario, r.metric, r.detail.get("key", ""), r.value, r.mc_se, r.reps, r.failures,
         r.detail.get("p_value", float("nan")))
        for r in reports
    ]
    write_table(out / "reports.csv", cols, rows, header)
    plain = []
    hist = []
    for r in reports:
        d = asdict(r)
        h = d["detail"].pop("histogram", None)
        plain.append(d)
        if h is not None:
            hist.append({"scenario": r.scenario, "key": r.detail["key"], **h})
    _write_json(
        out / "reports.json",
        {"version": __version__, "config_hash": config_hash(config), "scenario": scenario.to_dict(), "reports": plain},
    )
    if hist:
        _write_json(out / "histograms.json", {"version": __version__, "config_hash": config_hash(config), "histograms": hist})
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else str(exc)
        print(f"error: FileNotFoundError: {name}", file=sys.stderr)
        return 2
    except PanelDataError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the internal-error code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

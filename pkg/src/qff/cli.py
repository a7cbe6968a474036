"""Command-line interface: ``qff simulate | impute | forecast | evaluate``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .core import PanelError
from .forecasting import ForecastError
from .pipeline import (PIPELINE_METHODS, EvaluationError, config_from_file, export_report,
                       forecast_latest, impute_em, load_meta, plan_from_config, read_config,
                       read_panel, write_panel)
from .quantreg import QrConvergenceError
from .simulation import (DISTRIBUTIONS, METHODS, SimulationConfig, SimulationError,
                         run_extension_experiment, run_mae_experiment, run_r2_experiment)

log = logging.getLogger("qff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
NUMERICAL_ERRORS = (EvaluationError, SimulationError, QrConvergenceError, ForecastError,
                    np.linalg.LinAlgError, ArithmeticError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _methods(text, allowed):
    methods = _csv_list(text)
    bad = [m for m in methods if m not in allowed]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; choose from {','.join(allowed)}")
    return tuple(methods)


def _int_list(text):
    out = []
    for part in _csv_list(text):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return tuple(out)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    reps = args.reps if args.reps is not None else (100 if args.fast else 500)
    dists = args.dist or (["mixed"] if args.experiment == "extension" else list(DISTRIBUTIONS[:3]))
    if args.methods:
        methods = _methods(args.methods, METHODS)
    elif args.experiment == "extension":
        methods = ("proposed", "extended")
    else:
        methods = METHODS[:5]
    try:
        configs = [SimulationConfig(n=n, T=T, error_dist=d, replications=reps, seed=args.seed,
                                    methods=methods)
                   for d in dists for n in args.n for T in args.t]
    except ValueError as err:
        raise UsageError(str(err)) from None
    if args.experiment == "r2":
        report = run_r2_experiment(configs, workers=args.workers)
    elif args.experiment == "mae":
        report = run_mae_experiment(configs, workers=args.workers)
    else:
        report = run_extension_experiment(configs, workers=args.workers)
    text = report.to_csv(args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(report.to_table())
    return EXIT_OK


def cmd_impute(args) -> int:
    panel, load = read_panel(args.input, args.format, args.drop_threshold)
    if load.dropped:
        log.warning("dropped %d entities above the missing-rate threshold: %s",
                    len(load.dropped), ", ".join(load.dropped))
    meta = load_meta(args.meta) if args.meta else None
    res = impute_em(panel, args.rank, tol=args.tol, max_iter=args.max_iter, meta=meta)
    write_panel(res.completed, args.out, args.out_format)
    print(f"imputed {int((~panel.mask).sum())} entries in {res.iterations} iterations "
          f"(final change {res.final_change:.3g}, rank {res.rank_used})")
    return EXIT_OK


def _model_config(cp, args):
    return config_from_file(cp, warm_start=True if args.warm_start else None)


def cmd_forecast(args) -> int:
    cp = read_config(args.config)
    run = cp["run"] if cp.has_section("run") else {}
    methods = _methods(args.methods or run.get("methods", "naive,sw2002,proposed"), PIPELINE_METHODS)
    horizons = _int_list(args.horizons or run.get("horizons", "1-6"))
    window = args.window or int(run.get("window_length", 500))
    targets = _csv_list(args.targets or run.get("targets", "")) or None
    config = _model_config(cp, args)
    panel, _ = read_panel(args.panel, args.format)
    meta = load_meta(args.meta) if args.meta else None
    rows = forecast_latest(panel, meta, horizons, window, methods, config, targets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "forecasts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "origin", "h", "method", "forecast"])
        for e, t, h, m, f in rows:
            w.writerow([e, t, h, m, repr(f)])
    print(f"wrote {len(rows)} forecasts to {out / 'forecasts.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import run_evaluation

    cp = read_config(args.plan)
    run = cp["run"] if cp.has_section("run") else {}
    methods = _methods(args.methods or run.get("methods", ",".join(PIPELINE_METHODS)),
                       PIPELINE_METHODS)
    try:
        plan = plan_from_config(
            cp, test_periods=_periods(args.periods) if args.periods else None,
            horizons=_int_list(args.horizons) if args.horizons else None,
            window_length=args.window,
            target_entities=tuple(_csv_list(args.targets)) if args.targets else None)
    except (ValueError, KeyError) as err:
        raise UsageError(f"invalid plan: {err}") from None
    config = _model_config(cp, args)
    panel, load = read_panel(args.panel, args.format)
    if load.dropped:
        log.warning("dropped entities: %s", ", ".join(load.dropped))
    meta = load_meta(args.meta) if args.meta else None
    report = run_evaluation(panel, meta, plan, methods, config, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_report(report, out / "mae.csv", "csv")
    export_report(report, out / "summary.md", "markdown")
    with open(out / "bands.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "method", "mae", "band"])
        for m in report.methods():
            bands = report.station_bands(m)
            for e, v in bands["mae"].items():
                w.writerow([e, m, repr(float(v)), bands["band"][e]])
    if report.failures:
        log.warning("%d of %d forecasts failed", len(report.failures), report.attempts)
    print((out / "summary.md").read_text())
    return EXIT_OK


def _periods(text):
    out = []
    for part in _csv_list(text):
        a, _, b = part.partition("-")
        out.append((int(a), int(b)))
    return tuple(out)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qff", description="Combined quantile forecasting for panels.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    s.add_argument("--experiment", choices=("r2", "mae", "extension"), required=True)
    s.add_argument("--n", type=int, nargs="+", default=[100])
    s.add_argument("--t", type=int, nargs="+", default=[100])
    s.add_argument("--dist", nargs="+", help="error distributions: normal, t2, gamma, mixed")
    s.add_argument("--reps", type=int, help="replications (default 500, or 100 with --fast)")
    s.add_argument("--fast", action="store_true", help="100 replications")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="report CSV path (default: print CSV to stdout)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("impute", help="fill missing panel entries")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--format", choices=("long", "wide"), default="long")
    s.add_argument("--out-format", choices=("long", "wide"), default="wide")
    s.add_argument("--meta", help="station metadata CSV for the initial fill")
    s.add_argument("--drop-threshold", type=float, default=0.20)
    s.set_defaults(func=cmd_impute)

    for name, helptext in (("forecast", "forecast from the end of a complete panel"),
                           ("evaluate", "rolling-origin evaluation")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--panel", required=True)
        s.add_argument("--meta")
        if name == "forecast":
            s.add_argument("--config")
        else:
            s.add_argument("--plan")
            s.add_argument("--periods", help="test periods, e.g. 600-647,1100-1147")
            s.add_argument("--workers", type=int, default=1)
        s.add_argument("--methods")
        s.add_argument("--horizons", help="e.g. 1-6 or 1,3")
        s.add_argument("--window", type=int)
        s.add_argument("--targets", help="comma-separated entity ids")
        s.add_argument("--format", choices=("long", "wide"), default="wide")
        s.add_argument("--warm-start", action="store_true")
        s.add_argument("--out", required=True)
        s.set_defaults(func=cmd_forecast if name == "forecast" else cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"qff: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as err:
        print(f"qff: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PanelError, OSError, KeyError, ValueError) as err:
        print(f"qff: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

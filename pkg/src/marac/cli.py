"""Command-line front end: ``marac <subcommand> [options]``.

Exit codes are 0 on success, 1 for usage errors, 2 when a fit does not
converge, 3 for non-stationary coefficients and 4 for data or format errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .benchmark import DEFAULT_LAMBDAS, METHODS, append_metrics, noise_level_from_truth, run_benchmark, split_rmse
from .data_io import center_by_train_mean, read_bundle, write_bundle
from .estimator import FitOptions, default_context, fit, tune_lambda
from .exceptions import ContractError, ConvergenceError, FormatError, InsufficientDataError, StationarityError
from .model import MaracModel
from .selection import select_lags
from .serialization import encode_array, encode_list
from .simulator import SimConfig, simulate
from .stationarity import check_stationarity

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_NONSTATIONARY, EXIT_DATA = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class OutputDir:
    """Stage outputs in a sibling temporary directory and rename it into place.

    A pre-existing directory is written in place so that append-style tables
    accumulate across runs.
    """

    def __init__(self, path):
        self.path = os.path.abspath(path)
        self._fresh = not os.path.exists(self.path)
        if self._fresh:
            parent = os.path.dirname(self.path)
            os.makedirs(parent, exist_ok=True)
            self.work = tempfile.mkdtemp(prefix=".marac-", dir=parent)
        else:
            self.work = self.path

    def file(self, name):
        return os.path.join(self.work, name)

    def commit(self):
        if self._fresh and self.work != self.path:
            os.rename(self.work, self.path)
            self.work = self.path

    def abort(self):
        if self._fresh and self.work != self.path:
            shutil.rmtree(self.work, ignore_errors=True)


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _parse_lags(text):
    try:
        P, Q = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--lags expects 'P,Q', got {text!r}") from None
    if P < 0 or Q < 0:
        raise UsageError("lags must be non-negative")
    return P, Q


def _parse_mode(text):
    if text == "exact":
        return "exact", None
    if text.startswith("truncated:"):
        try:
            return "truncated", int(text.split(":", 1)[1])
        except ValueError:
            pass
    raise UsageError(f"--mode expects 'exact' or 'truncated:R', got {text!r}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _load_config(args):
    if not args.config:
        return {}
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise FormatError("config must be a JSON object")
    return cfg


def _settings(args, cfg):
    """Merge config-file values with command-line overrides."""
    s = dict(cfg)
    if getattr(args, "lags", None):
        s["P"], s["Q"] = _parse_lags(args.lags)
    if getattr(args, "lam", None) is not None:
        s["lambda"] = args.lam
    if getattr(args, "mode", None):
        s["mode"], s["R"] = _parse_mode(args.mode)
    elif isinstance(s.get("mode"), str) and s["mode"] != "exact":
        s["mode"], s["R"] = _parse_mode(s["mode"])
    if getattr(args, "latency", None) is not None:
        s["horizon"] = args.latency
    if getattr(args, "diag_sigma", False):
        s["diag_sigma"] = True
    if getattr(args, "max_iters", None) is not None:
        s["max_iters"] = args.max_iters
    if getattr(args, "tol", None) is not None:
        s["rel_tol"] = args.tol
    if args.seed is not None:
        s["seed"] = args.seed
    return s


def _provenance(args, settings, out):
    record = {
        "version": __version__,
        "argv": list(getattr(args, "_argv", [])),
        "subcommand": args.command,
        "seed": settings.get("seed", 0),
        "config": settings,
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _dump(record, out.file("provenance.json"))


def _load_series(args, settings):
    bundle = read_bundle(args.bundle)
    series = bundle.series
    if args.center or settings.get("center"):
        series, _ = center_by_train_mean(series, bundle.split)
    ctx = bundle.ctx or default_context(series.M, series.N)
    return bundle, series, ctx


def _fit_options(settings):
    return FitOptions.from_dict(settings)


def cmd_simulate(args, cfg):
    settings = _settings(args, cfg)
    known = set(SimConfig.__dataclass_fields__)
    unknown = sorted(set(settings) - known)
    if unknown:
        raise UsageError(f"unknown simulation settings: {', '.join(unknown)}")
    sim = simulate(SimConfig(**settings))
    out = OutputDir(args.out)
    try:
        t = sim.truth
        write_bundle(sim.series, sim.split, out.work, ctx=sim.ctx, extra={"source": "simulate"})
        truth = {
            "A": encode_list(t["A"]),
            "B": encode_list(t["B"]),
            "G": encode_list(t["G"]),
            "sigma_r": encode_array(t["sigma_r"]),
            "sigma_c": encode_array(t["sigma_c"]),
            "C1": encode_array(t["C1"]),
            "verdict": t["verdict"],
            "noise_level": noise_level_from_truth(t["sigma_r"], t["sigma_c"]),
            "config": sim.config.to_dict(),
        }
        _dump(truth, out.file("truth.json"))
        _provenance(args, sim.config.to_dict(), out)
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(f"wrote bundle T={sim.series.T} M={sim.series.M} N={sim.series.N} D={sim.series.D} to {out.path}")
    return EXIT_OK


def _write_fit(out, model, report):
    model.save(out.file("model.json"))
    _dump(report.to_dict(), out.file("fit_report.json"))
    with open(out.file("trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "max_block_change"])
        w.writerows(report.trace_rows())


def cmd_fit(args, cfg):
    settings = _settings(args, cfg)
    bundle, series, ctx = _load_series(args, settings)
    P, Q = settings.get("P", 1), settings.get("Q", 1 if series.D else 0)
    train = series.slice(0, bundle.split[0])
    model, report = fit(train, P, Q, ctx, _fit_options(settings))
    out = OutputDir(args.out)
    try:
        _write_fit(out, model, report)
        _provenance(args, settings, out)
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(f"iterations={report.iters_run} converged={report.converged} objective={report.objective_trace[-1]:.6g}")
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def cmd_tune(args, cfg):
    settings = _settings(args, cfg)
    bundle, series, ctx = _load_series(args, settings)
    P, Q = settings.get("P", 1), settings.get("Q", 1 if series.D else 0)
    grid = _floats(args.lambdas) if args.lambdas else settings.get("lambdas", list(DEFAULT_LAMBDAS))
    if not grid:
        raise UsageError("empty lambda grid")
    best, scores, model = tune_lambda(series, P, Q, ctx, grid, bundle.split, _fit_options(settings))
    out = OutputDir(args.out)
    try:
        with open(out.file("tuning.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "val_RMSE"])
            for lam in sorted(scores, reverse=True):
                w.writerow([lam, scores[lam]])
        _dump({"lambda": best, "val_RMSE": scores[best]}, out.file("chosen.json"))
        model.save(out.file("model.json"))
        _provenance(args, {**settings, "lambdas": list(grid)}, out)
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(f"best lambda={best:g} val_RMSE={scores[best]:.6g}")
    return EXIT_OK


def cmd_select(args, cfg):
    settings = _settings(args, cfg)
    bundle, series, ctx = _load_series(args, settings)
    Pmax = args.pmax if args.pmax is not None else settings.get("Pmax", 3)
    Qmax = args.qmax if args.qmax is not None else settings.get("Qmax", 3 if series.D else 0)
    Pmin = args.pmin if args.pmin is not None else settings.get("Pmin", 1)
    Qmin = args.qmin if args.qmin is not None else settings.get("Qmin", min(1, Qmax))
    grid = _floats(args.lambdas) if args.lambdas else settings.get("lambdas")
    # lambda tuning needs the validation window, so it stays visible to the sweep
    window = series.slice(0, bundle.split[1] if grid else bundle.split[0])
    result = select_lags(window, Pmax, Qmax, ctx, _fit_options(settings), Pmin=Pmin, Qmin=Qmin,
                         lam_grid=grid, split=bundle.split if grid else None, n_jobs=args.jobs)
    out = OutputDir(args.out)
    try:
        result.write_csv(out.file("selection.csv"))
        result.write_chosen(out.file("chosen.json"))
        _provenance(args, {**settings, "Pmax": Pmax, "Qmax": Qmax, "Pmin": Pmin, "Qmin": Qmin}, out)
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(json.dumps(result.chosen))
    return EXIT_OK


def cmd_predict(args, cfg):
    settings = _settings(args, cfg)
    model = MaracModel.load(args.model)
    bundle, series, _ = _load_series(args, settings)
    start = max(model.min_history, int(settings.get("start", model.min_history)))
    pred = model.predict_targets(series, start=start)
    summary = {"start": start, "shape": list(pred.shape), "horizon": model.horizon}
    bounds = {"train": (start, bundle.split[0]), "val": (bundle.split[0], bundle.split[1]),
              "test": (bundle.split[1], series.T)}
    for name, (b, e) in bounds.items():
        b = max(b, start)
        if e > b:
            summary[f"RMSE_{name}"] = split_rmse(model, series, b, e)
    out = OutputDir(args.out)
    try:
        np.ascontiguousarray(pred, dtype="<f8").tofile(out.file("predictions.bin"))
        _dump(summary, out.file("predictions.json"))
        _provenance(args, settings, out)
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(json.dumps(summary))
    return EXIT_OK


def cmd_benchmark(args, cfg):
    settings = _settings(args, cfg)
    methods = [m for m in args.methods.split(",") if m] if args.methods is not None else settings.get("methods", [])
    if not methods:
        raise UsageError("benchmark needs at least one method")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    horizons = [int(h) for h in _floats(args.horizons)] if args.horizons else settings.get("horizons",
                                                                                         [settings.get("horizon", 1)])
    grid = _floats(args.lambdas) if args.lambdas else settings.get("lambdas", list(DEFAULT_LAMBDAS))
    if args.lam is not None:
        grid = [args.lam]
    bundle, series, ctx = _load_series(args, settings)
    P, Q = settings.get("P", 1), settings.get("Q", 1 if series.D else 0)
    noise = None
    truth_path = os.path.join(args.bundle, "truth.json")
    if os.path.exists(truth_path):
        with open(truth_path) as fh:
            noise = json.load(fh).get("noise_level")
    opts = _fit_options({k: v for k, v in settings.items() if k != "horizon"})
    rows = run_benchmark(series, bundle.split, methods, horizons, P, Q, ctx, grid, noise, opts)
    out = OutputDir(args.out)
    try:
        append_metrics(rows, out.file("metrics.csv"))
        _provenance(args, {**settings, "methods": methods, "horizons": horizons, "lambdas": list(grid)}, out)
    except BaseException:
        out.abort()
        raise
    out.commit()
    for r in rows:
        print(f"{r['method']:12s} h={r['h']} {r['split']:5s} RMSE={r['RMSE']:.6f}")
    return EXIT_OK


def cmd_stationarity(args, cfg):
    settings = _settings(args, cfg)
    model = MaracModel.load(args.model)
    aux = [np.asarray(c, dtype=float) for c in settings.get("aux_coefs", [])]
    verdict = check_stationarity(model.A, model.B, aux)
    doc = verdict.to_dict()
    print(json.dumps(doc))
    if args.out:
        out = OutputDir(args.out)
        _dump(doc, out.file("verdict.json"))
        _provenance(args, settings, out)
        out.commit()
    if not verdict.stationary:
        print(f"non-stationary: companion radius {verdict.marac_radius:.6g} >= 1", file=sys.stderr)
        return EXIT_NONSTATIONARY
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings; flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker count for lag or lambda fan-out")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--lags", help="autoregressive and auxiliary lags as 'P,Q'")
    fitting.add_argument("--lambda", dest="lam", type=float, default=None)
    fitting.add_argument("--mode", help="'exact' or 'truncated:R'")
    fitting.add_argument("--latency", type=int, default=None, help="forecast latency h (default 1)")
    fitting.add_argument("--diag-sigma", action="store_true")
    fitting.add_argument("--max-iters", type=int, default=None)
    fitting.add_argument("--tol", type=float, default=None)
    fitting.add_argument("--center", action="store_true", help="subtract training means first")

    parser = _Parser(prog="marac", description="Matrix autoregression with auxiliary covariates.")
    parser.add_argument("--version", action="version", version=f"marac {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common, fitting], help="fit MARAC on the training window")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune-lambda", parents=[common, fitting], help="choose lambda on the validation window")
    p.add_argument("bundle")
    p.add_argument("--lambdas", help="comma-separated grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("select-lags", parents=[common, fitting], help="AIC/BIC lag selection")
    p.add_argument("bundle")
    p.add_argument("--pmax", type=int)
    p.add_argument("--qmax", type=int)
    p.add_argument("--pmin", type=int)
    p.add_argument("--qmin", type=int)
    p.add_argument("--lambdas", help="tune lambda per candidate over this grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", parents=[common, fitting], help="forecast a bundle with a saved model")
    p.add_argument("model")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", parents=[common, fitting], help="compare methods on the test window")
    p.add_argument("bundle")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--horizons", help="comma-separated latencies")
    p.add_argument("--lambdas", help="comma-separated grid for penalized methods")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("stationarity", parents=[common], help="companion-matrix verdict for a saved model")
    p.add_argument("model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stationarity)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"marac: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StationarityError as exc:
        print(f"marac: non-stationary: {exc}", file=sys.stderr)
        return EXIT_NONSTATIONARY
    except ConvergenceError as exc:
        print(f"marac: did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (FormatError, InsufficientDataError, OSError) as exc:
        print(f"marac: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, TypeError) as exc:
        print(f"marac: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``vwapopt synth | backtest | schedule``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from .backtest import (
    BacktestConfig, cross_validate_band, emit_frontier, emit_orders, emit_schedules,
    estimate_window, manifest, parse_lambda, run_backtest, write_manifest,
)
from .dynamic import shdp_execute
from .errors import DataError, NumericalError, VwapError
from .market_data import builtin_symbols, builtin_world, load_csv, synthesize, write_csv
from .price_model import VolatilityProfile
from .slippage import OrderSpec
from .static import StaticProblem, closed_form_static, solve_qp
from .volume_model import VolumeModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "VWAPOPT_THREADS"

log = logging.getLogger("vwapopt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _lambda_list(text):
    try:
        return tuple(parse_lambda(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers or 'inf', got {text!r}")


def _band(text):
    if text == "cv":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("band must be an integer or 'cv'")


# flag name -> BacktestConfig field
_CONFIG_FLAGS = {
    "window": "W", "cv_days": "W_cv", "T": "T", "order_frac": "order_frac",
    "spread_bp": "spread_bp", "alpha": "alpha", "lambdas": "lambdas", "band": "band_b",
    "cv_candidates": "cv_candidates",
}


def _build_config(args) -> BacktestConfig:
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    fields = {f.name for f in dataclasses.fields(BacktestConfig)}
    unknown = set(doc) - fields - {"threads", "static_lambda"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for flag, key in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    doc.pop("threads", None)
    doc.pop("static_lambda", None)
    try:
        return BacktestConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _config_extra(args, key):
    if not args.config:
        return None
    with open(args.config) as fh:
        return json.load(fh).get(key)


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        n = _config_extra(args, "threads") or os.environ.get(THREADS_ENV, 1)
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"bad thread count {n!r}")
    if n < 1:
        raise UsageError("thread count must be positive")
    return n


# ---------------------------------------------------------------------------


def load_world(spec: str, T: int, n_symbols: int):
    """Generating model and volatility profile from ``builtin`` or a JSON file.

    The JSON document is a volume-model document, optionally with a ``sigma``
    list; without it the built-in volatility profile is used.
    """
    symbols = builtin_symbols(n_symbols)
    if spec == "builtin":
        return builtin_world(T=T, symbols=symbols)
    try:
        with open(spec) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read model {spec}: {exc}")
    model = VolumeModel.from_dict(doc)
    if "sigma" in doc:
        profile = VolatilityProfile.from_dict(doc)
    else:
        profile = builtin_world(T=model.T, symbols=symbols)[1]
    return model, profile


def cmd_synth(args) -> int:
    if args.days < 1:
        raise UsageError("--days must be at least 1")
    if args.symbols < 1:
        raise UsageError("--symbols must be at least 1")
    model, profile = load_world(args.model, args.T, args.symbols)
    symbols = builtin_symbols(args.symbols)
    missing = [k for k in symbols if k not in model.b]
    if missing:
        # a fitted model names its own symbols; use those
        symbols = sorted(model.b)[: args.symbols]
    data = synthesize(model, profile, args.p0, args.days, symbols, args.seed)
    write_csv(data, args.out)
    log.info("wrote %d days x %d symbols to %s", data.n_days, len(symbols), args.out)
    return EXIT_OK


def cmd_backtest(args) -> int:
    config = _build_config(args)
    threads = _threads(args)
    data = load_csv(args.data, T=config.T)
    if data.n_days <= config.W + config.W_cv:
        raise UsageError(
            f"need more than window + cv-days = {config.W + config.W_cv} days, data has {data.n_days}"
        )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = run_backtest(data, config, threads=threads)
    elapsed = time.perf_counter() - start
    emit_orders(result.orders, out / "orders.csv")
    emit_frontier(result.stats, out / "frontier.csv")
    if args.schedules:
        emit_schedules(result.orders, out / "schedules.csv")
    doc = manifest(result, data, seed=args.seed, threads=threads, elapsed_seconds=elapsed,
                   data_path=str(args.data))
    write_manifest(doc, out / "manifest.json")
    for m in result.stats.methods:
        log.info("%-20s lambda=%-6s mean_S=%8.4f bp std_S=%8.4f bp failed=%d",
                 m.method.value, "" if m.lam is None else m.lam, m.mean_S * 1e4, m.std_S * 1e4,
                 m.n_failed)
    return EXIT_OK


def _find_day(data, date: dt.date) -> int:
    try:
        return data.days.index(date)
    except ValueError:
        raise DataError(f"date {date} not in data") from None


def cmd_schedule(args) -> int:
    if args.method == "static" and args.lam is not None:
        raise UsageError("--lambda applies to the dynamic method; set static_lambda in --config for the static QP")
    config = _build_config(args)
    data = load_csv(args.data, T=config.T)
    try:
        date = dt.date.fromisoformat(args.date)
    except ValueError:
        raise UsageError(f"bad --date {args.date!r}")
    i = _find_day(data, date)
    if args.symbol not in data.symbols:
        raise DataError(f"symbol {args.symbol} not in data")
    if i < config.W:
        raise UsageError(f"{date} has only {i} prior days, window needs {config.W}")
    band = config.band_b
    if band == "cv":
        if i < config.W + config.W_cv:
            raise UsageError("cross-validated band needs window + cv-days prior days")
        band = cross_validate_band(data.window(0, i), config)
    est = estimate_window(data.window(i - config.W, i), band)
    day = data.get(date, args.symbol)
    C = config.order_frac * est.expected_volume[args.symbol] if args.C is None else args.C
    costs = config.costs()
    if args.method == "static":
        static_lam = _config_extra(args, "static_lambda")
        if static_lam is None:
            sched = closed_form_static(est.frac, C)
        else:
            prob = StaticProblem.from_profile(est.frac, est.vol_profile.sigma2, costs, C,
                                              float(static_lam), est.expected_volume[args.symbol])
            sched = solve_qp(prob).schedule
    else:
        lam = math.inf if args.lam is None else args.lam
        order = OrderSpec(args.symbol, date, C, lam)
        sched = shdp_execute(day, order, costs, est.vol_profile, est.models[band], lam)
        if args.trace:
            sched.trace.to_csv(args.trace)
    write_schedule(sched, args.out)
    return EXIT_OK


def write_schedule(schedule, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u"])
        for t, u in enumerate(schedule.u, start=1):
            w.writerow([t, repr(float(u))])


# ---------------------------------------------------------------------------


def _add_config_flags(p, with_lambdas=True):
    p.add_argument("--config", help="JSON file with backtest configuration keys")
    p.add_argument("--window", type=int, help="estimation window W in days (20)")
    p.add_argument("--cv-days", type=int, help="cross-validation days W_cv (10)")
    p.add_argument("--T", type=int, help="intervals per day (390)")
    p.add_argument("--order-frac", type=float, help="order size as a fraction of E[V] (0.01)")
    p.add_argument("--spread-bp", type=float, help="constant bid-ask spread in b.p. (2)")
    p.add_argument("--alpha", type=float, help="market-order coefficient (90)")
    if with_lambdas:
        p.add_argument("--lambdas", type=_lambda_list, help="risk aversions, e.g. 0,1,10,inf")
    p.add_argument("--band", type=_band, help="covariance bandwidth or 'cv' (3)")
    p.add_argument("--cv-candidates", type=_int_list, help="bandwidths tried by --band cv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vwapopt", description="Optimal VWAP execution backtests.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic minute bars")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--symbols", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default="builtin", help="'builtin' or a model JSON file")
    p.add_argument("--T", type=int, default=390)
    p.add_argument("--p0", type=float, default=30.0, help="opening price on the first day")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("backtest", help="rolling out-of-sample backtest")
    p.add_argument("--data", required=True)
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--seed", type=int, help="recorded in the manifest")
    p.add_argument("--schedules", action="store_true", help="also write every schedule")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("schedule", help="one schedule for a (date, symbol)")
    p.add_argument("--data", required=True)
    p.add_argument("--date", required=True)
    p.add_argument("--symbol", required=True)
    p.add_argument("--method", choices=("static", "dynamic"), required=True)
    p.add_argument("--lambda", dest="lam", type=parse_lambda)
    p.add_argument("--C", type=float, help="order size in shares (default order_frac * E[V])")
    _add_config_flags(p, with_lambdas=False)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="per-step trace CSV (dynamic only)")
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vwapopt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"vwapopt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, VwapError) as exc:
        print(f"vwapopt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"vwapopt: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

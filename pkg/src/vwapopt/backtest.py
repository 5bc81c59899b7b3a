"""Rolling out-of-sample backtest of the static and dynamic methods."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .dynamic import shdp_execute
from .errors import DataError, VwapError
from .market_data import Dataset
from .price_model import VolatilityProfile, estimate_sigma
from .slippage import CostParams, Method, OrderSpec, Schedule, SlippageReport, format_lambda, realized_slippage
from .static import StaticProblem, closed_form_static, solve_qp
from .volume_model import VolumeModel, fit_volume_models, sequential_moments

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 1.0, 10.0, 100.0, 1000.0, math.inf)


@dataclass(frozen=True)
class BacktestConfig:
    W: int = 20
    W_cv: int = 10
    T: int = 390
    order_frac: float = 0.01
    spread_bp: float = 2.0
    alpha: float = 90.0
    lambdas: tuple = DEFAULT_LAMBDAS
    band_b: Union[int, str] = 3
    cv_candidates: tuple = (0, 3, 5, 10)
    static_qp_lambdas: tuple = ()

    def __post_init__(self):
        if self.W < 2:
            raise ValueError("estimation window W must be at least 2 days")
        if self.W_cv < 0:
            raise ValueError("W_cv must be non-negative")
        if not self.order_frac > 0:
            raise ValueError("order_frac must be positive")
        if self.spread_bp < 0 or self.alpha < 0:
            raise ValueError("spread and alpha must be non-negative")
        lams = tuple(float(x) for x in self.lambdas)
        if any(not x >= 0 for x in lams):
            raise ValueError("risk aversions must lie in [0, inf]")
        object.__setattr__(self, "lambdas", lams)
        qp = tuple(float(x) for x in self.static_qp_lambdas)
        if any(not (0 <= x < math.inf) for x in qp):
            raise ValueError("static QP risk aversions must be finite and non-negative")
        object.__setattr__(self, "static_qp_lambdas", qp)
        if self.band_b != "cv" and not (isinstance(self.band_b, int) and self.band_b >= 0):
            raise ValueError("band_b must be a non-negative integer or 'cv'")
        object.__setattr__(self, "cv_candidates", tuple(int(b) for b in self.cv_candidates))

    def costs(self) -> CostParams:
        return CostParams.constant(self.T, self.spread_bp, self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = [format_lambda(x) for x in self.lambdas]
        d["static_qp_lambdas"] = list(self.static_qp_lambdas)
        d["cv_candidates"] = list(self.cv_candidates)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "BacktestConfig":
        doc = dict(doc)
        if "lambdas" in doc:
            doc["lambdas"] = tuple(parse_lambda(x) for x in doc["lambdas"])
        for key in ("cv_candidates", "static_qp_lambdas"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def parse_lambda(x) -> float:
    if isinstance(x, str):
        x = x.strip().lower()
        if x in ("inf", "infinity", "+inf"):
            return math.inf
    return float(x)


@dataclass(frozen=True, eq=False)
class WindowEstimate:
    frac: np.ndarray
    vol_profile: VolatilityProfile
    expected_volume: dict
    models: dict  # bandwidth -> VolumeModel

    @property
    def model(self) -> VolumeModel:
        (m,) = self.models.values()
        return m


def estimate_window(window: Dataset, bands: Union[int, Sequence[int]] = 3) -> WindowEstimate:
    """Volume fractions, volatility, per-symbol expected volume and volume model.

    ``frac`` is the pooled average of ``m_t / V`` over all stock-days,
    renormalized to sum to one.
    """
    gaps = window.missing()
    if gaps:
        listed = ", ".join(f"{k} {d}" for d, k in gaps[:10])
        raise DataError(f"estimation window has {len(gaps)} missing series: {listed}")
    series = [window.get(d, k) for d in window.days for k in window.symbols]
    if not series:
        raise DataError("empty estimation window")
    vols = np.stack([s.volumes for s in series])
    frac = np.mean(vols / vols.sum(axis=1, keepdims=True), axis=0)
    frac = frac / frac.sum()
    expected_volume = {
        k: float(np.mean([window.get(d, k).total_volume for d in window.days]))
        for k in window.symbols
    }
    bands = [bands] if isinstance(bands, (int, np.integer)) else list(bands)
    models = fit_volume_models(series, bands)
    return WindowEstimate(frac=frac, vol_profile=estimate_sigma(series),
                          expected_volume=expected_volume, models=models)


@dataclass(frozen=True, eq=False)
class OrderResult:
    date: object
    symbol: str
    method: Method
    lam: Optional[float]
    C: float
    report: Optional[SlippageReport] = None
    schedule: Optional[Schedule] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass(frozen=True)
class MethodStats:
    method: Method
    lam: Optional[float]
    n: int
    n_failed: int
    mean_S: float
    var_S: float
    std_S: float
    mean_var_term_1: float
    mean_var_term_2: float
    var_term_2_variance: float
    ratio: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["lam"] = format_lambda(self.lam)
        return d


@dataclass(frozen=True)
class AggregateStats:
    methods: tuple  # of MethodStats, canonical order

    def get(self, method, lam=None) -> MethodStats:
        method = Method(method)
        for m in self.methods:
            if m.method == method and (lam is None or m.lam == lam):
                return m
        raise KeyError((method, lam))

    def to_dict(self) -> dict:
        return {"methods": [m.to_dict() for m in self.methods]}


def _method_keys(config: BacktestConfig):
    keys = [(Method.STATIC_CLOSED_FORM, None)]
    keys += [(Method.STATIC_QP, lam) for lam in config.static_qp_lambdas]
    for lam in config.lambdas:
        keys.append((Method.DYNAMIC_LAMBDA_INF if math.isinf(lam) else Method.DYNAMIC_SHDP, lam))
    return keys


def aggregate(results: Sequence[OrderResult], keys) -> AggregateStats:
    """Per-method statistics over successful orders.

    ``var_S`` is the unbiased sample variance.  ``ratio`` compares the
    cross-order variance of the cost term (the part of var(S) the objective
    ignores) with the mean of the modeled tracking variance.
    """
    out = []
    for method, lam in keys:
        rows = [r for r in results if r.method == method and r.lam == lam]
        good = [r.report for r in rows if r.ok]
        n = len(good)
        S = np.array([g.S for g in good])
        v1 = np.array([g.var_term_1 for g in good])
        v2 = np.array([g.var_term_2 for g in good])
        nan = float("nan")
        var_S = float(np.var(S, ddof=1)) if n > 1 else nan
        v2_var = float(np.var(v2, ddof=1)) if n > 1 else nan
        mean_v1 = float(np.mean(v1)) if n else nan
        out.append(MethodStats(
            method=method, lam=lam, n=n, n_failed=len(rows) - n,
            mean_S=float(np.mean(S)) if n else nan,
            var_S=var_S, std_S=math.sqrt(var_S) if n > 1 else nan,
            mean_var_term_1=mean_v1,
            mean_var_term_2=float(np.mean(v2)) if n else nan,
            var_term_2_variance=v2_var,
            ratio=v2_var / mean_v1 if n > 1 and mean_v1 > 0 else nan,
        ))
    return AggregateStats(tuple(out))


def _run_order(series, est: WindowEstimate, model: VolumeModel, config: BacktestConfig,
               costs: CostParams, keys) -> list[OrderResult]:
    k = series.symbol
    C = config.order_frac * est.expected_volume[k]
    sigma = est.vol_profile.sigma
    out = []
    moments = None
    moments_error = None
    for method, lam in keys:
        order = OrderSpec(k, series.date, C, 0.0 if lam is None else lam)
        try:
            if method == Method.STATIC_CLOSED_FORM:
                sched = closed_form_static(est.frac, C)
            elif method == Method.STATIC_QP:
                prob = StaticProblem.from_profile(est.frac, est.vol_profile.sigma2, costs, C,
                                                  lam, est.expected_volume[k])
                sched = solve_qp(prob).schedule
            else:
                if moments is None and moments_error is None:
                    try:
                        moments = sequential_moments(model, k, series.volumes)
                    except VwapError as exc:
                        moments_error = exc
                if moments_error is not None:
                    raise moments_error
                sched = shdp_execute(series, order, costs, est.vol_profile, model, lam, moments=moments)
            report = realized_slippage(series, sched, order, costs, sigma)
            out.append(OrderResult(series.date, k, method, lam, C, report, sched))
        except (VwapError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("%s %s %s lambda=%s failed: %s", series.date, k, method.value,
                        format_lambda(lam), exc)
            out.append(OrderResult(series.date, k, method, lam, C, error=str(exc)))
    return out


def _simulate(data: Dataset, config: BacktestConfig, day_indices, band: int, keys,
              threads: int) -> list[OrderResult]:
    costs = config.costs()
    tasks = []
    for i in day_indices:
        est = estimate_window(data.window(i - config.W, i), band)
        for series in data.day(i):
            tasks.append((series, est))

    def work(task):
        series, est = task
        return _run_order(series, est, est.models[band], config, costs, keys)

    if threads <= 1:
        chunks = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, tasks))
    return [r for chunk in chunks for r in chunk]


def _check_data(data: Dataset, config: BacktestConfig):
    if data.T != config.T:
        raise DataError(f"data has T={data.T}, config expects T={config.T}")
    if data.n_days <= config.W + config.W_cv:
        raise DataError(
            f"need more than W + W_cv = {config.W + config.W_cv} days, data has {data.n_days}"
        )


def cross_validate_band(data: Dataset, config: BacktestConfig,
                        candidates: Optional[Sequence[int]] = None, threads: int = 1) -> int:
    """Bandwidth whose lambda=inf dynamic schedules track VWAP best on the
    ``W_cv`` days following the first estimation window.  Ties go to the
    smaller bandwidth."""
    candidates = list(config.cv_candidates if candidates is None else candidates)
    if not candidates:
        raise ValueError("no candidate bandwidths")
    if len(candidates) == 1:
        return int(candidates[0])
    if config.W_cv < 1:
        raise ValueError("cross-validation needs W_cv >= 1")
    if data.n_days < config.W + config.W_cv:
        raise DataError(f"need {config.W + config.W_cv} days for cross-validation")
    candidates = sorted(set(int(b) for b in candidates))
    costs = config.costs()
    keys = [(Method.DYNAMIC_LAMBDA_INF, math.inf)]
    tasks = []
    for i in range(config.W, config.W + config.W_cv):
        est = estimate_window(data.window(i - config.W, i), candidates)
        for series in data.day(i):
            for b in candidates:
                tasks.append((series, est, b))

    def work(task):
        series, est, b = task
        return b, _run_order(series, est, est.models[b], config, costs, keys)[0]

    if threads <= 1:
        done = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(work, tasks))
    scores = {}
    for b in candidates:
        S = np.array([r.report.S for bb, r in done if bb == b and r.ok])
        scores[b] = float(np.std(S, ddof=1)) if S.size > 1 else math.inf
    log.info("bandwidth cross-validation std_S: %s", scores)
    best = min(scores.values())
    return min(b for b in candidates if scores[b] == best)


@dataclass(eq=False)
class BacktestResult:
    config: BacktestConfig
    band: int
    orders: list = field(repr=False)
    stats: AggregateStats = None


def run_backtest(data: Dataset, config: BacktestConfig = BacktestConfig(),
                 threads: int = 1) -> BacktestResult:
    """Simulate every method on each day after the first ``W + W_cv`` days,
    estimating on the preceding ``W`` days only."""
    _check_data(data, config)
    band = cross_validate_band(data, config, threads=threads) if config.band_b == "cv" else config.band_b
    keys = _method_keys(config)
    days = range(config.W + config.W_cv, data.n_days)
    orders = _simulate(data, config, days, band, keys, threads)
    return BacktestResult(config=config, band=band, orders=orders, stats=aggregate(orders, keys))


# ---------------------------------------------------------------------------
# reports


def emit_frontier(stats: AggregateStats, path) -> None:
    if not stats.methods:
        raise ValueError("no statistics to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "lambda", "mean_S_bp", "std_S_bp", "ratio_var_terms"])
        for m in stats.methods:
            w.writerow([m.method.value, format_lambda(m.lam), repr(m.mean_S * 1e4),
                        repr(m.std_S * 1e4), repr(m.ratio)])


ORDER_COLUMNS = ["date", "symbol", "method", "lambda", "C", "S", "tracking_term", "cost_term",
                 "var_term_1", "var_term_2", "tracking_approx", "flags", "error"]


def emit_orders(orders: Sequence[OrderResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ORDER_COLUMNS)
        for r in orders:
            rep = r.report.to_dict() if r.ok else {}
            vals = [repr(rep[c]) if c in rep else "" for c in ORDER_COLUMNS[5:11]]
            flags = ";".join(r.schedule.flags) if r.schedule is not None else ""
            w.writerow([r.date.isoformat(), r.symbol, r.method.value, format_lambda(r.lam),
                        repr(r.C), *vals, flags, r.error or ""])


def emit_schedules(orders: Sequence[OrderResult], path) -> None:
    """Long-format schedules: one row per (order, interval)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "symbol", "method", "lambda", "t", "u"])
        for r in orders:
            if r.schedule is None:
                continue
            head = [r.date.isoformat(), r.symbol, r.method.value, format_lambda(r.lam)]
            for t, u in enumerate(r.schedule.u, start=1):
                w.writerow(head + [t, repr(float(u))])


def data_digest(data: Dataset) -> str:
    """SHA-256 over the canonical binary content of a dataset."""
    h = hashlib.sha256()
    for d in data.days:
        for k in data.symbols:
            s = data.series.get((d, k))
            if s is None:
                continue
            h.update(f"{d.isoformat()}|{k}|".encode())
            h.update(np.ascontiguousarray(s.volumes, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(s.prices, dtype="<f8").tobytes())
    return h.hexdigest()


def manifest(result: BacktestResult, data: Dataset, **extra) -> dict:
    from . import __version__

    doc = {
        "version": __version__,
        "config": result.config.to_dict(),
        "band": result.band,
        "data_digest": data_digest(data),
        "n_days": data.n_days,
        "symbols": list(data.symbols),
        "n_orders": len(result.orders),
        "n_failed": sum(not r.ok for r in result.orders),
        "stats": result.stats.to_dict(),
    }
    doc.update(extra)
    return doc


def write_manifest(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")

import csv
import dataclasses
import datetime as dt
import math

import numpy as np
import pytest

from vwapopt.backtest import (
    AggregateStats, BacktestConfig, MethodStats, aggregate, cross_validate_band, data_digest,
    emit_frontier, emit_orders, estimate_window, manifest, parse_lambda, run_backtest,
)
import vwapopt.backtest as bt
from vwapopt.errors import DataError
from vwapopt.market_data import Dataset, MinuteSeries, builtin_symbols, builtin_world, synthesize
from vwapopt.slippage import Method

SMALL = BacktestConfig(W=20, W_cv=10, T=20, lambdas=(0.0, 10.0, math.inf))


@pytest.fixture(scope="module")
def small_run(data20):
    return run_backtest(data20, SMALL)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        BacktestConfig(W=1)
    with pytest.raises(ValueError):
        BacktestConfig(order_frac=0)
    with pytest.raises(ValueError):
        BacktestConfig(W_cv=-1)
    with pytest.raises(ValueError):
        BacktestConfig(band_b="five")
    cfg = BacktestConfig(band_b="cv", static_qp_lambdas=(5.0,))
    assert BacktestConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict()["lambdas"][-1] == "inf"
    assert parse_lambda("inf") == math.inf and parse_lambda("10") == 10.0


def test_estimate_window_identical_days():
    rng = np.random.default_rng(0)
    m = rng.uniform(100, 900, 15)
    p = np.full(15, 20.0)
    series = [MinuteSeries(k, dt.date(2021, 3, 1) + dt.timedelta(days=i), m * (1 + j), p * (1 + 0.01 * i))
              for i in range(4) for j, k in enumerate(["A", "B"])]
    est = estimate_window(Dataset.from_series(series), 0)
    np.testing.assert_allclose(est.frac, m / m.sum(), rtol=1e-12)
    assert est.expected_volume["B"] == pytest.approx(2 * m.sum())
    assert abs(est.frac.sum() - 1) < 1e-9


def test_expected_volume_is_mean_of_totals(data20):
    w = data20.window(3, 23)
    est = estimate_window(w, 3)
    for k in w.symbols:
        assert est.expected_volume[k] == pytest.approx(np.mean([w.get(d, k).total_volume for d in w.days]),
                                                       rel=1e-14)


def test_level_estimates_consistent():
    # level noise is dominated by the day factor; keep it small so 20 days pin b down
    model, prof = builtin_world(T=390, symbols=30, factor_scale=0.05)
    data = synthesize(model, prof, 30.0, 20, builtin_symbols(30), seed=0)
    est = estimate_window(data, 3)
    for k, b in model.b.items():
        assert abs(est.model.b[k] - b) < 0.05


def test_estimate_window_reports_gaps(data20):
    w = data20.window(0, 5)
    d, k = w.days[2], w.symbols[1]
    holey = Dataset(w.days, w.symbols, {key: s for key, s in w.series.items() if key != (d, k)})
    with pytest.raises(DataError, match=str(d)):
        estimate_window(holey)


def test_counts_and_feasibility(small_run, data20):
    n_expected = (data20.n_days - 30) * len(data20.symbols)
    assert len(small_run.stats.methods) == 4
    for m in small_run.stats.methods:
        assert m.n + m.n_failed == n_expected
        assert m.var_S >= 0
    for r in small_run.orders:
        if r.schedule is not None:
            assert r.schedule.u.min() >= 0
            assert abs(r.schedule.u.sum() - r.C) <= 1e-9 * r.C


def test_static_identical_across_symbols(small_run):
    by_day = {}
    for r in small_run.orders:
        if r.method == Method.STATIC_CLOSED_FORM:
            by_day.setdefault(r.date, []).append(r.schedule.u / r.C)
    for fracs in by_day.values():
        for f in fracs[1:]:
            np.testing.assert_allclose(f, fracs[0], rtol=1e-14)


def test_mean_identity(small_run):
    for m in small_run.stats.methods:
        S = [r.report.S for r in small_run.orders if r.method == m.method and r.lam == m.lam and r.ok]
        assert m.mean_S == pytest.approx(np.mean(S), abs=1e-12)
        assert m.var_S == pytest.approx(np.var(S, ddof=1), rel=1e-12)


def test_thread_determinism(small_run, data20):
    again = run_backtest(data20, SMALL, threads=3)
    assert again.stats == small_run.stats
    for a, b in zip(small_run.orders, again.orders):
        assert (a.date, a.symbol, a.method, a.lam) == (b.date, b.symbol, b.method, b.lam)
        assert a.schedule.u.tobytes() == b.schedule.u.tobytes()


def test_out_of_sample(data20):
    cfg = dataclasses.replace(SMALL, lambdas=(5.0,))
    base = run_backtest(data20, cfg)
    cut = 34
    poisoned = {
        key: (MinuteSeries(s.symbol, s.date, s.volumes * 7.0, s.prices * 3.0)
              if data20.days.index(key[0]) > cut else s)
        for key, s in data20.series.items()
    }
    other = run_backtest(Dataset(data20.days, data20.symbols, poisoned), cfg)
    keep = set(data20.days[: cut + 1])
    for a, b in zip(base.orders, other.orders):
        if a.date in keep:
            assert a.report == b.report
            assert a.schedule.u.tobytes() == b.schedule.u.tobytes()


def test_failures_recorded_not_fatal(data20, monkeypatch):
    real = bt.shdp_execute

    def flaky(day, order, *a, **k):
        if day.symbol == data20.symbols[0]:
            raise bt.VwapError("boom")
        return real(day, order, *a, **k)

    monkeypatch.setattr(bt, "shdp_execute", flaky)
    res = run_backtest(data20, dataclasses.replace(SMALL, lambdas=(1.0,)))
    st = res.stats.get(Method.DYNAMIC_SHDP, 1.0)
    assert st.n_failed == data20.n_days - 30
    assert st.n == 3 * (data20.n_days - 30)
    assert all(r.error == "boom" for r in res.orders if not r.ok)


def test_needs_enough_days(data20):
    with pytest.raises(DataError):
        run_backtest(data20.window(0, 30), SMALL)


def test_cv_single_candidate_and_empty(data20):
    assert cross_validate_band(data20, SMALL, [7]) == 7
    with pytest.raises(ValueError):
        cross_validate_band(data20, SMALL, [])


def test_cv_tie_goes_to_smaller_band(data20, monkeypatch):
    # with a zero-variance outcome every bandwidth scores the same
    real = bt._run_order

    def flat(series, est, model, config, costs, keys):
        out = real(series, est, model, config, costs, keys)
        rep = dataclasses.replace(out[0].report, S=0.0)
        return [dataclasses.replace(out[0], report=rep)]

    monkeypatch.setattr(bt, "_run_order", flat)
    assert cross_validate_band(data20, SMALL, [10, 3, 5]) == 3


def test_cv_returns_a_candidate(data20):
    res = run_backtest(data20, dataclasses.replace(SMALL, band_b="cv", cv_candidates=(0, 3), lambdas=(math.inf,)))
    assert res.band in (0, 3)


def test_static_qp_rows(data20):
    cfg = dataclasses.replace(SMALL, lambdas=(), static_qp_lambdas=(0.0,))
    res = run_backtest(data20.window(0, 32), cfg)
    assert [m.method for m in res.stats.methods] == [Method.STATIC_CLOSED_FORM, Method.STATIC_QP]
    assert all(r.ok for r in res.orders)


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_frontier_format(tmp_path, small_run):
    path = tmp_path / "f.csv"
    emit_frontier(small_run.stats, path)
    rows = _read(path)
    assert rows[0] == ["method", "lambda", "mean_S_bp", "std_S_bp", "ratio_var_terms"]
    assert [r[1] for r in rows[1:]] == ["", "0.0", "10.0", "inf"]
    st = small_run.stats.methods[0]
    assert float(rows[1][2]) == st.mean_S * 1e4
    one = AggregateStats(small_run.stats.methods[:1])
    emit_frontier(one, path)
    assert len(_read(path)) == 2
    with pytest.raises(ValueError):
        emit_frontier(AggregateStats(()), path)


def test_seven_frontier_rows(tmp_path, data20):
    res = run_backtest(data20.window(0, 32), dataclasses.replace(SMALL, lambdas=bt.DEFAULT_LAMBDAS))
    emit_frontier(res.stats, tmp_path / "f.csv")
    rows = _read(tmp_path / "f.csv")
    assert len(rows) == 8 and rows[-1][1] == "inf"


def test_orders_csv_and_manifest(tmp_path, small_run, data20):
    emit_orders(small_run.orders, tmp_path / "o.csv")
    rows = _read(tmp_path / "o.csv")
    assert len(rows) == 1 + len(small_run.orders)
    assert float(rows[1][5]) == small_run.orders[0].report.S
    doc = manifest(small_run, data20, seed=4)
    assert doc["data_digest"] == data_digest(data20) and doc["seed"] == 4
    assert doc["band"] == 3 and doc["n_failed"] == 0


def test_ratio_uses_cost_term_dispersion():
    reps = []
    for S, v1, v2 in [(1e-4, 4e-8, 1e-9), (2e-4, 6e-8, 3e-9), (-1e-4, 5e-8, 2e-9)]:
        reps.append(bt.OrderResult(None, "A", Method.STATIC_CLOSED_FORM, None, 1.0,
                                   report=_FakeReport(S, v1, v2)))
    st = aggregate(reps, [(Method.STATIC_CLOSED_FORM, None)]).methods[0]
    assert isinstance(st, MethodStats)
    assert st.ratio == pytest.approx(np.var([1e-9, 3e-9, 2e-9], ddof=1) / 5e-8, rel=1e-12)
    assert st.mean_var_term_2 == pytest.approx(2e-9)


@dataclasses.dataclass
class _FakeReport:
    S: float
    var_term_1: float
    var_term_2: float

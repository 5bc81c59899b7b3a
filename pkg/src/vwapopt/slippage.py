"""Transaction-cost model, schedules and realized VWAP slippage."""
from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError


class Method(str, enum.Enum):
    STATIC_CLOSED_FORM = "static-closed-form"
    STATIC_QP = "static-qp"
    DYNAMIC_SHDP = "dynamic-shdp"
    DYNAMIC_LAMBDA_INF = "dynamic-lambda-inf"


def format_lambda(lam: Optional[float]) -> str:
    if lam is None:
        return ""
    if math.isinf(lam):
        return "inf"
    return repr(float(lam))


@dataclass(frozen=True, eq=False)
class CostParams:
    """Fractional bid-ask spread per interval and the market-order coefficient."""

    spread: np.ndarray
    alpha: float

    def __post_init__(self):
        s = np.array(self.spread, dtype=float)
        if s.ndim != 1 or np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("spread must be a finite non-negative vector")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        s.flags.writeable = False
        object.__setattr__(self, "spread", s)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def constant(cls, T: int, spread_bp: float = 2.0, alpha: float = 90.0) -> "CostParams":
        return cls(spread=np.full(T, spread_bp * 1e-4), alpha=alpha)

    @property
    def T(self) -> int:
        return self.spread.size


@dataclass(frozen=True)
class OrderSpec:
    symbol: str
    date: dt.date
    C: float
    lam: float = 0.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"order size must be positive, got {self.C}")
        if not self.lam >= 0:
            raise ValueError(f"risk aversion must be in [0, inf], got {self.lam}")


@dataclass(frozen=True, eq=False)
class Schedule:
    """Shares bought per interval; non-negative and summing to the order size."""

    u: np.ndarray
    method: Method
    order_size: float
    lam: Optional[float] = None
    flags: tuple = ()
    trace: object = field(default=None, repr=False)

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        if u.ndim != 1 or not np.all(np.isfinite(u)):
            raise ValueError("schedule must be a finite vector")
        if np.any(u < 0):
            raise ValueError(f"schedule has negative trades (min {u.min():.3e})")
        if abs(u.sum() - self.order_size) > 1e-9 * self.order_size:
            raise ValueError(
                f"schedule sums to {u.sum():.12g}, order size is {self.order_size:.12g}"
            )
        u.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "method", Method(self.method))

    @property
    def T(self) -> int:
        return self.u.size


def effective_price(p, s, alpha, u, m):
    """Average price paid per share when buying ``u`` of ``m`` market shares."""
    p, s, u, m = (np.asarray(a, dtype=float) for a in (p, s, u, m))
    if np.any(m <= 0):
        raise DataError("effective price undefined for zero market volume")
    if np.any(p <= 0) or np.any(u < 0):
        raise ValueError("need positive price and non-negative trade")
    out = p * (1.0 - s / 2 + alpha * (s / 2) * (u / m))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SlippageReport:
    S: float
    tracking_term: float
    cost_term: float
    var_term_1: float
    var_term_2: float
    tracking_approx: float

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "tracking_term": self.tracking_term,
            "cost_term": self.cost_term,
            "var_term_1": self.var_term_1,
            "var_term_2": self.var_term_2,
            "tracking_approx": self.tracking_approx,
        }


def _check(day, schedule, order, costs):
    T = day.T
    if schedule.T != T or costs.T != T:
        raise DataError(
            f"dimension mismatch: day T={T}, schedule T={schedule.T}, costs T={costs.T}"
        )
    m = np.asarray(day.volumes, dtype=float)
    if np.any(m <= 0):
        raise DataError(f"{day.symbol} {day.date}: slippage needs every minute volume > 0")
    if abs(schedule.order_size - order.C) > 1e-9 * order.C:
        raise ValueError("schedule was built for a different order size")
    return m


def realized_slippage(day, schedule: Schedule, order: OrderSpec, costs: CostParams,
                      sigma: Optional[np.ndarray] = None) -> SlippageReport:
    """Normalized slippage of ``schedule`` on the realized ``day``.

    ``S = (sum p u - C p_vwap) / (C p_vwap) + sum (s/2)(alpha u^2/(C m) - u/C)``.
    ``sigma`` (per-interval return volatilities) is only needed for
    ``var_term_1``, which is NaN without it.
    """
    m = _check(day, schedule, order, costs)
    p = np.asarray(day.prices, dtype=float)
    u = schedule.u
    C = order.C
    s = costs.spread
    V = m.sum()
    p_vwap = m @ p / V
    tracking = (p @ u - C * p_vwap) / (C * p_vwap)
    cost = float(np.sum(s / 2 * (costs.alpha * u**2 / (C * m) - u / C)))

    # cumulative fractions through interval t multiply the return into t+1
    gap = np.cumsum(m)[:-1] / V - np.cumsum(u)[:-1] / C
    eta = np.diff(p) / p[:-1]
    tracking_approx = float(eta @ gap)
    if sigma is None:
        var1 = float("nan")
    else:
        sigma = np.asarray(sigma, dtype=float)
        var1 = float(np.sum(sigma[1:] ** 2 * gap**2))
    return SlippageReport(
        S=float(tracking + cost),
        tracking_term=float(tracking),
        cost_term=cost,
        var_term_1=var1,
        var_term_2=cost,
        tracking_approx=tracking_approx,
    )


def cash_flow_slippage(day, schedule: Schedule, order: OrderSpec, costs: CostParams,
                       spread_at_vwap: bool = False) -> float:
    """Slippage straight from the broker's cash flow ``sum u p_hat - C p_vwap``.

    With ``spread_at_vwap`` the spread cost of each interval is charged at the
    day's VWAP instead of the interval price, which is the first-order
    approximation built into :func:`realized_slippage`.
    """
    m = _check(day, schedule, order, costs)
    p = np.asarray(day.prices, dtype=float)
    u = schedule.u
    p_vwap = float(m @ p / m.sum())
    benchmark = order.C * p_vwap
    if spread_at_vwap:
        paid = float(u @ p) + p_vwap * float(
            u @ (costs.spread / 2 * (costs.alpha * u / m - 1.0))
        )
    else:
        paid = float(u @ effective_price(p, costs.spread, costs.alpha, u, m))
    return (paid - benchmark) / benchmark

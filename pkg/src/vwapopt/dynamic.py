"""Closed-loop VWAP execution by shrinking-horizon dynamic programming.

State ``x = (cum_u, cum_m)`` (shares we bought, shares the market traded),
action ``u``, disturbance ``(m_t, V)``.  Dynamics ``x' = x + (u, m_t)``; stage cost

    R u^2 + r u + x^T Q x,   R = alpha s / (2 C m_t),  r = -s / (2 C),
    Q = lam sigma_t^2 [[1/C^2, -1/(C V)], [-1/(C V), 1/V^2]].

At every interval the future disturbances are replaced by their conditional
marginals, the linear-quadratic problem is solved backwards, and only the
first action is used.  The last action is forced to complete the order.

Riccati step (re-derived from the Bellman equation).  With ``H = E R + D11``,
``g = D e1`` and ``h = r + d1 + 2 (D E c)_1``:

    K = -g^T / H,   l = -h / (2H)
    D' = E Q + D - g g^T / H
    d' = d + 2 D E c - h g / H
    b' = b + tr(D E[c c^T]) + d^T E c - h^2 / (4H)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, NumericalError
from .slippage import Method, Schedule
from .volume_model import DayMoments, VolumeModel, VolumeMoments, sequential_moments


@dataclass(frozen=True)
class ExecutionState:
    cum_u: float
    cum_m: float
    t: int

    def __post_init__(self):
        if self.cum_u < 0 or self.cum_m < 0:
            raise ValueError("cumulative volumes must be non-negative")
        if self.t < 1:
            raise ValueError("intervals are numbered from 1")

    @property
    def x(self) -> np.ndarray:
        return np.array([self.cum_u, self.cum_m])


@dataclass(frozen=True, eq=False)
class LqscStage:
    """Expected stage quantities under the conditional marginal of one interval."""

    Q: np.ndarray
    R: float
    r: float
    c_mean: np.ndarray
    c_second: np.ndarray


@dataclass(frozen=True, eq=False)
class ValueCoeffs:
    D: np.ndarray
    d: np.ndarray
    b: float

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.D @ x + self.d @ x + self.b)


@dataclass(frozen=True, eq=False)
class PolicyCoeffs:
    K: np.ndarray
    l: float

    def __call__(self, x) -> float:
        return float(self.K @ np.asarray(x, dtype=float) + self.l)


@dataclass(frozen=True)
class ScalarCoeffs:
    beta: float
    gamma: float
    delta: float


def build_stages(mom: VolumeMoments, sigma2: Sequence[float], spread: Sequence[float],
                 alpha: float, C: float, lam: float) -> list[LqscStage]:
    """Stages for intervals t..T from the moments available at time t."""
    if math.isinf(lam):
        raise ValueError("infinite risk aversion has no finite LQ form; use policy_lambda_inf")
    sigma2 = np.asarray(sigma2, dtype=float)
    spread = np.asarray(spread, dtype=float)
    n = mom.e_m.size
    if sigma2.size != n or spread.size != n:
        raise ValueError(f"need {n} stage volatilities and spreads")
    eiV, eiV2 = mom.e_inv_V, mom.e_inv_V_sq
    stages = []
    for j in range(n):
        w = lam * sigma2[j]
        Q = w * np.array([[1.0 / C**2, -eiV / C], [-eiV / C, eiV2]])
        stages.append(
            LqscStage(
                Q=Q,
                R=alpha * spread[j] / (2 * C) * mom.e_inv_m[j],
                r=-spread[j] / (2 * C),
                c_mean=np.array([0.0, mom.e_m[j]]),
                c_second=np.array([[0.0, 0.0], [0.0, mom.e_m_sq[j]]]),
            )
        )
    return stages


def _final(stage: LqscStage, C: float):
    e1 = np.array([1.0, 0.0])
    D = stage.Q + stage.R * np.outer(e1, e1)
    d = -(stage.r + 2 * C * stage.R) * e1
    b = stage.R * C**2 + stage.r * C
    return ValueCoeffs(D, d, b), PolicyCoeffs(np.array([-1.0, 0.0]), float(C))


def riccati_full(stages: Sequence[LqscStage], C: float):
    """Backward recursion over 2x2 cost-to-go matrices.

    Returns ``(values, policies)`` aligned with ``stages``; the last policy is
    the forced completion ``u = C - cum_u``.
    """
    n = len(stages)
    if n == 0:
        raise ValueError("no stages")
    value, policy = _final(stages[-1], C)
    values, policies = [value], [policy]
    for j in range(n - 2, -1, -1):
        st = stages[j]
        D, d, b = value.D, value.d, value.b
        H = st.R + D[0, 0]
        if not H > 0:
            raise NumericalError(f"vanishing curvature at stage {j} (H={H:.3e})")
        g = D[:, 0]
        Dc = D @ st.c_mean
        h = st.r + d[0] + 2 * Dc[0]
        policy = PolicyCoeffs(K=-g / H, l=-h / (2 * H))
        D_new = st.Q + D - np.outer(g, g) / H
        D_new = 0.5 * (D_new + D_new.T)
        value = ValueCoeffs(
            D=D_new,
            d=d + 2 * Dc - h * g / H,
            b=b + float(np.sum(D * st.c_second)) + d @ st.c_mean - h * h / (4 * H),
        )
        values.append(value)
        policies.append(policy)
    return values[::-1], policies[::-1]


def riccati_scalar(stages: Sequence[LqscStage], C: float):
    """The same recursion restricted to the three entries the policy needs:
    ``beta = D11``, ``gamma = D12``, ``delta = d1``."""
    n = len(stages)
    if n == 0:
        raise ValueError("no stages")
    last = stages[-1]
    beta = last.Q[0, 0] + last.R
    gamma = last.Q[0, 1]
    delta = -last.r - 2 * C * last.R
    coeffs = [ScalarCoeffs(beta, gamma, delta)]
    policies = [PolicyCoeffs(np.array([-1.0, 0.0]), float(C))]
    for j in range(n - 2, -1, -1):
        st = stages[j]
        H = st.R + beta
        if not H > 0:
            raise NumericalError(f"vanishing curvature at stage {j} (H={H:.3e})")
        em = st.c_mean[1]
        l = -(st.r + delta + 2 * gamma * em) / (2 * H)
        policies.append(PolicyCoeffs(np.array([-beta / H, -gamma / H]), l))
        beta, gamma, delta = (
            st.Q[0, 0] + st.R * beta / H,
            st.Q[0, 1] + st.R * gamma / H,
            delta + 2 * beta * l + 2 * gamma * em,
        )
        coeffs.append(ScalarCoeffs(beta, gamma, delta))
    return coeffs[::-1], policies[::-1]


def policy_lambda_inf(state: ExecutionState, e_inv_V: float, e_m_t: float, C: float) -> float:
    """Pure-tracking action: catch up to the estimated market fraction, then
    buy next interval's expected share.  May be negative before projection."""
    return C * e_inv_V * (state.cum_m + e_m_t) - state.cum_u


def policy_table(moments: DayMoments, sigma2, spread, alpha: float, C: float, lam: float):
    """``(K_cum_u, K_cum_m, l)`` of the first-stage policy at every t = 1..T-1.

    The scalar recursion of every information time runs at once, vectorized
    over t; row t only reads row t of ``moments``.
    """
    T = moments.T
    sigma2 = np.asarray(sigma2, dtype=float)
    s = np.asarray(spread, dtype=float)
    K1, K2, l_out = np.full(T, np.nan), np.full(T, np.nan), np.full(T, np.nan)
    if math.isinf(lam):
        K1[:-1] = -1.0
        K2[:-1] = C * moments.e_inv_V[:-1]
        l_out[:-1] = C * moments.e_inv_V[:-1] * np.diagonal(moments.e_m)[:-1]
        return K1, K2, l_out
    eiV = moments.e_inv_V
    tau = T - 1
    a = alpha * s[tau] / (2 * C) * moments.e_inv_m[:, tau]
    beta = lam * sigma2[tau] / C**2 + a
    gamma = -lam * sigma2[tau] / C * eiV
    delta = s[tau] / (2 * C) - 2 * C * a
    for tau in range(T - 2, -1, -1):
        rows = slice(0, tau + 1)
        beta, gamma, delta = beta[rows], gamma[rows], delta[rows]
        a = alpha * s[tau] / (2 * C) * moments.e_inv_m[rows, tau]
        em = moments.e_m[rows, tau]
        H = a + beta
        if not np.all(H > 0):
            raise NumericalError(f"vanishing curvature at interval {tau + 1}")
        l = -(-s[tau] / (2 * C) + delta + 2 * gamma * em) / (2 * H)
        K1[tau] = -beta[tau] / H[tau]
        K2[tau] = -gamma[tau] / H[tau]
        l_out[tau] = l[tau]
        q11 = lam * sigma2[tau] / C**2
        q12 = -lam * sigma2[tau] / C * eiV[rows]
        beta, gamma, delta = (
            q11 + a * beta / H,
            q12 + a * gamma / H,
            delta + 2 * beta * l + 2 * gamma * em,
        )
    return K1, K2, l_out


@dataclass(eq=False)
class ShdpTrace:
    t: np.ndarray
    cum_u: np.ndarray
    cum_m: np.ndarray
    e_inv_V: np.ndarray
    u_raw: np.ndarray
    u_clipped: np.ndarray
    flags: list = field(default_factory=list)

    @property
    def clipped_steps(self) -> np.ndarray:
        return self.t[self.u_raw < self.u_clipped]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cum_u", "cum_m", "e_inv_V", "u_raw", "u_clipped"])
            for row in zip(self.t, self.cum_u, self.cum_m, self.e_inv_V, self.u_raw, self.u_clipped):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def shdp_execute(day, order, costs, vol_profile, model: VolumeModel,
                 lam: Optional[float] = None, moments: Optional[DayMoments] = None) -> Schedule:
    """Run the shrinking-horizon policy through one realized day.

    Market volumes are revealed one interval at a time: the action for
    interval t uses only ``day.volumes[:t-1]``.  Negative actions are clipped
    at zero; the last interval buys whatever remains.  ``moments`` may be
    passed in to share the conditioning work between several ``lam``.
    """
    lam = order.lam if lam is None else lam
    T = day.T
    if costs.T != T or vol_profile.T != T or model.T != T:
        raise DataError("day, costs, volatility profile and model disagree on T")
    if moments is None:
        moments = sequential_moments(model, day.symbol, day.volumes)
    C = order.C
    K1, K2, l = policy_table(moments, vol_profile.sigma2, costs.spread, costs.alpha, C, lam)
    m = np.asarray(day.volumes, dtype=float)
    u_raw = np.empty(T)
    u = np.empty(T)
    cum_u_hist = np.empty(T)
    cum_m_hist = np.empty(T)
    cum_u = cum_m = 0.0
    for t in range(T - 1):
        cum_u_hist[t], cum_m_hist[t] = cum_u, cum_m
        u_raw[t] = K1[t] * cum_u + K2[t] * cum_m + l[t]
        u[t] = max(u_raw[t], 0.0)
        cum_u += u[t]
        cum_m += m[t]
    cum_u_hist[-1], cum_m_hist[-1] = cum_u, cum_m
    u_raw[-1] = C - cum_u
    u[-1] = max(u_raw[-1], 0.0)
    flags = []
    if u_raw[-1] < 0:
        # earlier trades overshot the order: rescale to restore the total
        u = u * (C / u.sum())
        flags.append("final-trade-negative-rescaled")
    if np.any(u_raw[:-1] < 0):
        flags.append("clipped-negative-trades")
    trace = ShdpTrace(t=np.arange(1, T + 1), cum_u=cum_u_hist, cum_m=cum_m_hist,
                      e_inv_V=np.array(moments.e_inv_V), u_raw=u_raw, u_clipped=u.copy(),
                      flags=flags)
    method = Method.DYNAMIC_LAMBDA_INF if math.isinf(lam) else Method.DYNAMIC_SHDP
    return Schedule(u=u, method=method, order_size=C, lam=lam, flags=tuple(flags), trace=trace)

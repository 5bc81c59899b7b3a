"""Per-interval volatility profile of the intraday price process."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class VolatilityProfile:
    """Standard deviations of the fractional price increments.

    ``sigma[t]`` (0-based) is the standard deviation of the return from
    interval ``t-1`` to interval ``t``. ``sigma[0]`` would be the overnight
    move; it only ever multiplies an empty tracking term.
    """

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim != 1 or sigma.size == 0:
            raise ValueError("sigma must be a non-empty vector")
        if not np.all(np.isfinite(sigma)) or np.any(sigma < 0):
            raise ValueError("sigma must be finite and non-negative")
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma", sigma)

    @property
    def T(self) -> int:
        return self.sigma.size

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma**2

    def to_dict(self) -> dict:
        return {"sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "VolatilityProfile":
        return cls(sigma=np.asarray(doc["sigma"], dtype=float))


def estimate_sigma(window: Sequence) -> VolatilityProfile:
    """Pooled root-mean-square of one-interval returns across stock-days.

    Entry ``t`` averages ``((p_t - p_{t-1}) / p_{t-1})**2``; the first entry,
    which has no intraday increment, copies the second.
    """
    if len(window) == 0:
        raise DataError("volatility estimation needs at least one stock-day")
    prices = np.stack([np.asarray(s.prices, dtype=float) for s in window])
    if prices.shape[1] < 2:
        raise DataError("volatility estimation needs at least two intervals per day")
    if np.any(prices <= 0):
        raise DataError("prices must be strictly positive")
    ret = np.diff(prices, axis=1) / prices[:, :-1]
    var = np.empty(prices.shape[1])
    var[1:] = np.mean(ret**2, axis=0)
    var[0] = var[1]
    return VolatilityProfile(sigma=np.sqrt(var))

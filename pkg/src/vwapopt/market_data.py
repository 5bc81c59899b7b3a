"""Minute-bar market data: containers, CSV ingestion and synthetic generation."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .price_model import VolatilityProfile
from .volume_model import VolumeModel, banded_from_diagonals

DEFAULT_T = 390
CSV_COLUMNS = ("date", "symbol", "minute_index", "price", "volume")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MinuteSeries:
    """One stock-day of per-interval volumes and average prices."""

    symbol: str
    date: dt.date
    volumes: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        vol = _frozen(self.volumes)
        px = _frozen(self.prices)
        if vol.ndim != 1 or px.ndim != 1:
            raise DataError(f"{self.symbol} {self.date}: volumes and prices must be 1-d")
        if vol.shape != px.shape:
            raise DataError(
                f"{self.symbol} {self.date}: {vol.size} volumes but {px.size} prices"
            )
        if vol.size == 0:
            raise DataError(f"{self.symbol} {self.date}: empty series")
        if not np.all(np.isfinite(vol)) or np.any(vol < 0):
            raise DataError(f"{self.symbol} {self.date}: negative or non-finite volume")
        if not np.all(np.isfinite(px)) or np.any(px <= 0):
            raise DataError(f"{self.symbol} {self.date}: non-positive or non-finite price")
        if vol.sum() <= 0:
            raise DataError(f"{self.symbol} {self.date}: zero total volume")
        object.__setattr__(self, "volumes", vol)
        object.__setattr__(self, "prices", px)

    @property
    def T(self) -> int:
        return self.volumes.size

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    @property
    def vwap(self) -> float:
        return float(self.volumes @ self.prices / self.volumes.sum())


@dataclass(frozen=True, eq=False)
class Dataset:
    """Stock-days keyed by (date, symbol); dates strictly increasing."""

    days: tuple
    symbols: tuple
    series: Mapping = field(repr=False)

    def __post_init__(self):
        days = tuple(self.days)
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DataError("dataset dates must be strictly increasing")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "series", MappingProxyType(dict(self.series)))
        T = {s.T for s in self.series.values()}
        if len(T) > 1:
            raise DataError(f"mixed interval counts in dataset: {sorted(T)}")

    @classmethod
    def from_series(cls, series: Iterable[MinuteSeries]) -> "Dataset":
        table = {}
        for s in series:
            key = (s.date, s.symbol)
            if key in table:
                raise DataError(f"duplicate series for {s.symbol} on {s.date}")
            table[key] = s
        days = sorted({d for d, _ in table})
        symbols = sorted({k for _, k in table})
        return cls(days=tuple(days), symbols=tuple(symbols), series=table)

    @property
    def T(self) -> int:
        return next(iter(self.series.values())).T

    @property
    def n_days(self) -> int:
        return len(self.days)

    def get(self, date, symbol) -> MinuteSeries:
        try:
            return self.series[(date, symbol)]
        except KeyError:
            raise KeyError(f"no data for {symbol} on {date}") from None

    def day(self, i: int) -> list[MinuteSeries]:
        """All series present on day index ``i``, in symbol order."""
        d = self.days[i]
        return [self.series[(d, k)] for k in self.symbols if (d, k) in self.series]

    def window(self, start: int, stop: int) -> "Dataset":
        """Sub-dataset of day indices ``start:stop``."""
        days = self.days[start:stop]
        keep = set(days)
        return Dataset(
            days=days,
            symbols=self.symbols,
            series={k: v for k, v in self.series.items() if k[0] in keep},
        )

    def missing(self) -> list[tuple]:
        return [(d, k) for d in self.days for k in self.symbols if (d, k) not in self.series]

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for d in self.days:
            for k in self.symbols:
                s = self.series.get((d, k))
                if s is None:
                    continue
                frames.append(
                    pd.DataFrame(
                        {
                            "date": d.isoformat(),
                            "symbol": k,
                            "minute_index": np.arange(1, s.T + 1),
                            "price": s.prices,
                            "volume": s.volumes,
                        }
                    )
                )
        return pd.concat(frames, ignore_index=True)


def load_csv(path, T: int = DEFAULT_T) -> Dataset:
    """Read a minute-bar CSV (``date,symbol,minute_index,price,volume``).

    Zero-volume minutes are rejected: the log-normal volume model cannot
    take their logarithm.  Sparse data can be floored at one share before
    loading.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"date": str, "symbol": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    # header is line 1
    rows = np.arange(len(df)) + 2

    for col in ("minute_index", "price", "volume"):
        num = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(num.isna().to_numpy())
        if bad.size:
            raise DataError(f"non-numeric {col} {df[col].iloc[bad[0]]!r}", row=rows[bad[0]])
        df[col] = num
    bad = np.flatnonzero(~(df["price"].to_numpy() > 0))
    if bad.size:
        raise DataError(f"non-positive price {df['price'].iloc[bad[0]]}", row=rows[bad[0]])
    bad = np.flatnonzero(df["volume"].to_numpy() < 0)
    if bad.size:
        raise DataError(f"negative volume {df['volume'].iloc[bad[0]]}", row=rows[bad[0]])
    bad = np.flatnonzero(df["volume"].to_numpy() == 0)
    if bad.size:
        raise DataError("zero-volume minute (not supported by the volume model)", row=rows[bad[0]])
    minute = df["minute_index"].to_numpy()
    bad = np.flatnonzero((minute != np.round(minute)) | (minute < 1) | (minute > T))
    if bad.size:
        raise DataError(f"minute_index {minute[bad[0]]} outside 1..{T}", row=rows[bad[0]])

    try:
        dates = [dt.date.fromisoformat(d) for d in df["date"]]
    except (TypeError, ValueError):
        for i, d in enumerate(df["date"]):
            try:
                dt.date.fromisoformat(d)
            except (TypeError, ValueError):
                raise DataError(f"bad date {d!r}", row=rows[i]) from None
        raise
    df["date"] = dates
    df["minute_index"] = df["minute_index"].astype(int)
    df["row"] = rows

    dup = df.duplicated(["date", "symbol", "minute_index"], keep="first").to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise DataError(
            f"duplicate minute {df['minute_index'].iloc[i]} for "
            f"{df['symbol'].iloc[i]} on {df['date'].iloc[i]}",
            row=rows[i],
        )

    out = []
    for (date, symbol), g in df.groupby(["date", "symbol"], sort=True):
        if len(g) != T:
            raise DataError(
                f"incomplete day: {symbol} on {date} has {len(g)} of {T} minutes",
                row=int(g["row"].iloc[0]),
            )
        g = g.sort_values("minute_index")
        out.append(
            MinuteSeries(
                symbol=symbol,
                date=date,
                volumes=g["volume"].to_numpy(float),
                prices=g["price"].to_numpy(float),
            )
        )
    if not out:
        raise DataError(f"{path}: no data rows")
    return Dataset.from_series(out)


def write_csv(data: Dataset, path) -> None:
    data.to_frame().to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# synthetic data


def trading_days(start: dt.date, n: int) -> list[dt.date]:
    """``n`` consecutive weekdays starting at ``start`` (no holiday calendar)."""
    days, d = [], start
    while len(days) < n:
        if d.weekday() < 5:
            days.append(d)
        d += dt.timedelta(days=1)
    return days


def _sampling_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix L with L L^T = cov; accepts PSD-singular, rejects indefinite."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(cov)
    scale = max(float(np.abs(w).max()), 1e-300)
    if w.min() < -1e-10 * scale:
        raise DataError(
            f"volume covariance is not positive semidefinite (min eigenvalue {w.min():.3e})"
        )
    return V * np.sqrt(np.clip(w, 0.0, None))


def synthesize(
    model: VolumeModel,
    vol_profile: VolatilityProfile,
    p0,
    n_days: int,
    symbols: Sequence[str],
    seed: int,
    start: dt.date = dt.date(2012, 9, 24),
) -> Dataset:
    """Draw ``n_days`` of log-normal volumes and geometric random-walk prices.

    Prices continue from each symbol's previous close; ``p0`` is a scalar or a
    per-symbol mapping of opening prices on the first day.
    """
    T = model.T
    if vol_profile.T != T:
        raise DataError(f"volatility profile has T={vol_profile.T}, model has T={T}")
    if n_days < 1:
        raise DataError("n_days must be positive")
    missing = [k for k in symbols if k not in model.b]
    if missing:
        raise DataError(f"model has no level b for symbols {missing}")
    L = _sampling_factor(model.covariance)
    rng = np.random.default_rng(seed)
    last = {k: float(p0[k] if isinstance(p0, Mapping) else p0) for k in symbols}
    sigma = vol_profile.sigma
    out = []
    for date in trading_days(start, n_days):
        for k in symbols:
            z = rng.standard_normal(T)
            eta = sigma * rng.standard_normal(T)
            volumes = np.exp(model.mu + model.b[k] + L @ z)
            prices = last[k] * np.cumprod(1.0 + eta)
            last[k] = float(prices[-1])
            out.append(MinuteSeries(symbol=k, date=date, volumes=volumes, prices=prices))
    return Dataset.from_series(out)


def builtin_symbols(n: int) -> list[str]:
    return [f"SYM{i + 1:02d}" for i in range(n)]


def builtin_world(
    T: int = DEFAULT_T,
    symbols: Sequence[str] | int = 5,
    band: int = 3,
    factor_scale: float = 0.3,
    daily_vol: float = 0.009,
    ma_decay: float = 0.45,
    factor_tilt: float = 0.5,
    idio_std: float = 0.55,
) -> tuple[VolumeModel, VolatilityProfile]:
    """A realistic-looking generating model for synthetic minute bars.

    U-shaped log-volume profile, a day-level volume factor that tilts between
    morning and afternoon, an MA-type short-lag banded component of bandwidth
    ``band``, and a U-shaped per-minute volatility with ``daily_vol`` total
    open-to-close standard deviation.
    """
    if isinstance(symbols, int):
        symbols = builtin_symbols(symbols)
    x = np.linspace(-1.0, 1.0, T)
    mu = 1.1 * x**2 + 0.5 * np.exp(-(x + 1.0) * 25.0) - 0.15 * x
    mu -= mu.mean()
    levels = np.linspace(3.8, 5.2, len(symbols)) if len(symbols) > 1 else np.array([4.4])
    b = {k: float(v) for k, v in zip(symbols, levels)}
    f = factor_scale * (1.0 + factor_tilt * x)

    # MA(band) innovations: nonzero autocovariance exactly up to lag `band`
    theta = ma_decay ** np.arange(band + 1)
    theta = theta / np.sqrt(theta @ theta)
    idio = idio_std * (1.0 + 0.3 * x**2)
    diagonals = []
    for lag in range(band + 1):
        acov = theta[: band + 1 - lag] @ theta[lag:]
        diagonals.append(acov * idio[: T - lag] * idio[lag:])
    S = banded_from_diagonals(diagonals, T)
    model = VolumeModel(mu=mu, b=b, factor_f=f, banded_S=S, band_b=band)

    shape = 0.8 + 0.9 * x**2
    sigma = shape * daily_vol / np.sqrt(np.sum(shape**2))
    return model, VolatilityProfile(sigma=sigma)

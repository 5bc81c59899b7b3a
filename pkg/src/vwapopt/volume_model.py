"""Joint log-normal model of intraday market volumes.

log m = mu + b_k + e,  e ~ N(0, f f^T + S),  S banded.

Fitting pools all symbols of a trailing window for the profile ``mu`` and the
covariance, and keeps one level ``b_k`` per symbol.  Conditioning on the
observed prefix of a day gives the Gaussian conditional of the remaining log
volumes, from which the moments the dynamic solver needs are derived.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError, SingularConditioningError


def band_mask(T: int, band_b: int) -> np.ndarray:
    idx = np.arange(T)
    return np.abs(idx[:, None] - idx[None, :]) <= band_b


def banded_from_diagonals(diagonals: Sequence, T: int) -> np.ndarray:
    """Symmetric T x T matrix from its main diagonal and upper diagonals."""
    S = np.zeros((T, T))
    for lag, diag in enumerate(diagonals):
        diag = np.asarray(diag, dtype=float)
        if diag.size != T - lag:
            raise ValueError(f"diagonal {lag} has length {diag.size}, expected {T - lag}")
        S += np.diag(diag, lag)
        if lag:
            S += np.diag(diag, -lag)
    return S


def band_diagonals(S: np.ndarray, band_b: int) -> list[np.ndarray]:
    return [np.diagonal(S, lag).copy() for lag in range(min(band_b, S.shape[0] - 1) + 1)]


@dataclass(frozen=True, eq=False)
class VolumeModel:
    """Fitted parameters; the covariance is ``f f^T + S + psd_shift * I``."""

    mu: np.ndarray
    b: Mapping[str, float]
    factor_f: np.ndarray
    banded_S: np.ndarray
    band_b: int
    psd_shift: float = 0.0
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        f = np.array(self.factor_f, dtype=float)
        S = np.array(self.banded_S, dtype=float)
        T = mu.size
        if f.shape != (T,) or S.shape != (T, T):
            raise ValueError(f"inconsistent model shapes: mu {mu.shape}, f {f.shape}, S {S.shape}")
        if self.band_b < 0:
            raise ValueError("band_b must be non-negative")
        if abs(mu.sum()) > 1e-9:
            raise ValueError(f"profile mu must sum to zero, got {mu.sum():.3e}")
        if not np.array_equal(S, S.T):
            raise ValueError("banded_S must be symmetric")
        if np.any(S[~band_mask(T, self.band_b)] != 0):
            raise ValueError(f"banded_S has entries outside bandwidth {self.band_b}")
        if self.psd_shift < 0:
            raise ValueError("psd_shift must be non-negative")
        for a in (mu, f, S):
            a.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "factor_f", f)
        object.__setattr__(self, "banded_S", S)
        object.__setattr__(self, "b", {str(k): float(v) for k, v in self.b.items()})

    @property
    def T(self) -> int:
        return self.mu.size

    @cached_property
    def covariance(self) -> np.ndarray:
        cov = np.outer(self.factor_f, self.factor_f) + self.banded_S
        cov[np.diag_indices_from(cov)] += self.psd_shift
        cov.flags.writeable = False
        return cov

    def mean(self, symbol: str) -> np.ndarray:
        try:
            return self.mu + self.b[symbol]
        except KeyError:
            raise DataError(f"volume model has no level for symbol {symbol!r}") from None

    def is_positive_definite(self) -> bool:
        try:
            np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "band_b": self.band_b,
            "mu": self.mu.tolist(),
            "b": dict(self.b),
            "f": self.factor_f.tolist(),
            "S_band": {
                "bandwidth": self.band_b,
                "diagonals": [d.tolist() for d in band_diagonals(self.banded_S, self.band_b)],
            },
            "psd_shift": self.psd_shift,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "VolumeModel":
        T = int(doc["T"])
        band = int(doc["band_b"])
        S = banded_from_diagonals(doc["S_band"]["diagonals"], T)
        return cls(
            mu=np.asarray(doc["mu"], dtype=float),
            b=doc["b"],
            factor_f=np.asarray(doc["f"], dtype=float),
            banded_S=S,
            band_b=band,
            psd_shift=float(doc.get("psd_shift", 0.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "VolumeModel":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# estimation


def _log_volumes(series) -> np.ndarray:
    v = np.asarray(series.volumes, dtype=float)
    if np.any(v <= 0):
        raise DataError(
            f"{getattr(series, 'symbol', '?')} {getattr(series, 'date', '')}: "
            "volumes must be strictly positive for the log-normal model"
        )
    return np.log(v)


def estimate_b(window: Sequence) -> float:
    """Per-stock level: grand mean of log volumes over the window's days."""
    if len(window) == 0:
        raise DataError("estimate_b needs a non-empty window")
    logs = np.stack([_log_volumes(s) for s in window])
    return float(logs.mean())


def estimate_mu(window: Sequence, b: Mapping[str, float]) -> np.ndarray:
    """Cross-sectional mean of ``log m - b_k`` over every (day, symbol)."""
    if len(window) == 0:
        raise DataError("estimate_mu needs a non-empty window")
    missing = sorted({s.symbol for s in window if s.symbol not in b})
    if missing:
        raise DataError(f"no level b for symbols {missing}")
    rows = [_log_volumes(s) - b[s.symbol] for s in window]
    return np.mean(rows, axis=0)


def residual_matrix(window: Sequence, b: Mapping[str, float], mu: np.ndarray) -> np.ndarray:
    """T x n matrix with one demeaned log-volume column per stock-day."""
    return np.stack([_log_volumes(s) - b[s.symbol] - mu for s in window], axis=1)


def _leading_factor(X: np.ndarray):
    T, n = X.shape
    if n < 2:
        raise DataError("covariance estimation needs at least two observations")
    if not np.any(X):
        raise DataError("residual matrix is identically zero")
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    f = s[0] * U[:, 0] / math.sqrt(n - 1)
    if f.sum() < 0:
        f = -f
    return f, X @ X.T / (n - 1), s


def estimate_covariance(X: np.ndarray, band_b: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-one factor plus banded remainder of the sample covariance of ``X``.

    ``f`` is the leading left singular vector scaled by ``s_1 / sqrt(n - 1)``;
    ``S`` copies ``XX^T/(n-1) - f f^T`` inside the band and is zero outside.
    The sign of ``f`` is fixed so that its entries sum to a non-negative value.
    """
    X = np.asarray(X, dtype=float)
    if band_b < 0:
        raise ValueError("band_b must be non-negative")
    f, sample, _ = _leading_factor(X)
    S = np.where(band_mask(X.shape[0], band_b), sample - np.outer(f, f), 0.0)
    S = 0.5 * (S + S.T)
    return f, S


def psd_shift_for(cov: np.ndarray) -> float:
    """Smallest shift from a doubling sequence that makes ``cov`` Cholesky-factorable."""
    try:
        np.linalg.cholesky(cov)
        return 0.0
    except np.linalg.LinAlgError:
        pass
    T = cov.shape[0]
    delta = 1e-10 * max(float(np.trace(cov)), 1e-300) / T
    eye = np.eye(T)
    for _ in range(200):
        try:
            np.linalg.cholesky(cov + delta * eye)
            return delta
        except np.linalg.LinAlgError:
            delta *= 2.0
    raise NumericalError("could not make the volume covariance positive definite")


def fit_volume_models(window: Sequence, bands: Sequence[int]) -> dict[int, VolumeModel]:
    """Fit one model per bandwidth, sharing the level/profile/SVD work."""
    if len(window) == 0:
        raise DataError("cannot fit a volume model on an empty window")
    by_symbol: dict[str, list] = {}
    for s in window:
        by_symbol.setdefault(s.symbol, []).append(s)
    b = {k: estimate_b(v) for k, v in sorted(by_symbol.items())}
    mu = estimate_mu(window, b)
    # remove float dust so the profile sums to zero exactly enough
    mu = mu - mu.mean()
    X = residual_matrix(window, b, mu)
    T, n = X.shape
    f, sample, s = _leading_factor(X)
    resid = sample - np.outer(f, f)
    resid = 0.5 * (resid + resid.T)
    out = {}
    for band in bands:
        S = np.where(band_mask(T, band), resid, 0.0)
        shift = psd_shift_for(np.outer(f, f) + S)
        out[band] = VolumeModel(
            mu=mu, b=b, factor_f=f, banded_S=S, band_b=band, psd_shift=shift,
            meta={"n_obs": n, "leading_singular_values": s[:5].tolist()},
        )
    return out


def fit_volume_model(window: Sequence, band_b: int) -> VolumeModel:
    return fit_volume_models(window, [band_b])[band_b]


# ---------------------------------------------------------------------------
# conditioning and moments


@dataclass(frozen=True, eq=False)
class ConditionalVolumeDist:
    """Gaussian law of log m_t..m_T given m_1..m_{t-1} (``t`` is 1-based)."""

    nu: np.ndarray
    sigma: np.ndarray
    t: int
    observed_sum: float = 0.0

    def __post_init__(self):
        n = self.nu.shape[0]
        if self.sigma.shape != (n, n):
            raise ValueError("nu and sigma dimensions disagree")
        if n == 0:
            raise ValueError("no unobserved intervals left")

    @property
    def size(self) -> int:
        return self.nu.shape[0]

    def observe(self, m: float) -> "ConditionalVolumeDist":
        """Condition on the next market volume (one Schur-complement step)."""
        if not m > 0:
            raise DataError(f"observed volume must be positive, got {m}")
        if self.size == 1:
            raise ValueError("interval T is the last one; nothing left to condition")
        p = self.sigma[0, 0]
        col = self.sigma[1:, 0]
        nu = self.nu[1:].copy()
        sigma = self.sigma[1:, 1:].copy()
        scale = max(float(np.max(np.diag(self.sigma))), 1e-300)
        if p > 1e-13 * scale:
            gain = col / p
            nu += gain * (math.log(m) - self.nu[0])
            sigma -= np.outer(gain, col)
        elif np.max(np.abs(col), initial=0.0) > 1e-12 * scale:
            raise SingularConditioningError(
                f"zero conditional variance at t={self.t} with nonzero covariance", math.inf
            )
        return ConditionalVolumeDist(nu=nu, sigma=sigma, t=self.t + 1, observed_sum=self.observed_sum + m)


def unconditional(model: VolumeModel, symbol: str) -> ConditionalVolumeDist:
    return ConditionalVolumeDist(
        nu=model.mean(symbol).copy(), sigma=np.array(model.covariance), t=1, observed_sum=0.0
    )


def condition(model: VolumeModel, symbol: str, observed: Sequence[float]) -> ConditionalVolumeDist:
    """Exact Gaussian conditional of the log volumes after ``observed`` minutes."""
    observed = np.asarray(observed, dtype=float)
    k = observed.size
    T = model.T
    if k >= T:
        raise ValueError(f"observed {k} of {T} intervals; nothing left to condition on")
    if np.any(observed <= 0):
        raise DataError("observed volumes must be strictly positive")
    mean = model.mean(symbol)
    cov = model.covariance
    if k == 0:
        return ConditionalVolumeDist(nu=mean.copy(), sigma=np.array(cov), t=1, observed_sum=0.0)
    A = cov[:k, :k]
    B = cov[:k, k:]
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularConditioningError(
            f"leading {k}x{k} covariance block is not positive definite", np.linalg.cond(A)
        ) from None
    diag = np.diag(factor[0])
    if diag.min() <= 1e-8 * diag.max():
        raise SingularConditioningError(
            f"leading {k}x{k} covariance block is numerically singular", np.linalg.cond(A)
        )
    resid = np.log(observed) - mean[:k]
    nu = mean[k:] + B.T @ scipy.linalg.cho_solve(factor, resid, check_finite=False)
    sigma = cov[k:, k:] - B.T @ scipy.linalg.cho_solve(factor, B, check_finite=False)
    sigma = 0.5 * (sigma + sigma.T)
    return ConditionalVolumeDist(nu=nu, sigma=sigma, t=k + 1, observed_sum=float(observed.sum()))


@dataclass(frozen=True, eq=False)
class VolumeMoments:
    """Conditional moments at information time ``t``; vectors run over tau = t..T."""

    e_m: np.ndarray
    e_inv_m: np.ndarray
    e_V: float
    var_V: float
    e_inv_V: float
    e_m_sq: np.ndarray
    e_inv_V_sq: float


def moments(dist: ConditionalVolumeDist) -> VolumeMoments:
    """Log-normal moments, with ``E[1/V]`` from a second-order Taylor expansion."""
    d = np.diag(dist.sigma)
    try:
        with np.errstate(over="raise"):
            e_m = np.exp(dist.nu + d / 2)
            e_inv_m = np.exp(-dist.nu + d / 2)
            e_m_sq = np.exp(2 * dist.nu + 2 * d)
            var_V = float(e_m @ np.expm1(dist.sigma) @ e_m)
    except FloatingPointError as exc:
        raise NumericalError(f"overflow in volume moments at t={dist.t}") from exc
    e_V = dist.observed_sum + float(e_m.sum())
    return VolumeMoments(
        e_m=e_m,
        e_inv_m=e_inv_m,
        e_V=e_V,
        var_V=var_V,
        e_inv_V=1.0 / e_V + var_V / e_V**3,
        e_m_sq=e_m_sq,
        e_inv_V_sq=1.0 / e_V**2 + 3.0 * var_V / e_V**4,
    )


def monte_carlo_moments(dist: ConditionalVolumeDist, n: int, seed: int = 0, chunk: int = 100_000) -> dict:
    """Sampling estimates of the same quantities, for diagnostics."""
    rng = np.random.default_rng(seed)
    k = dist.size
    w, V = np.linalg.eigh(dist.sigma)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    s_m = np.zeros(k)
    s_inv_m = np.zeros(k)
    s_V = s_V2 = s_inv_V = 0.0
    done = 0
    while done < n:
        size = min(chunk, n - done)
        m = np.exp(dist.nu + rng.standard_normal((size, k)) @ L.T)
        total = dist.observed_sum + m.sum(axis=1)
        s_m += m.sum(axis=0)
        s_inv_m += (1.0 / m).sum(axis=0)
        s_V += total.sum()
        s_V2 += (total**2).sum()
        s_inv_V += (1.0 / total).sum()
        done += size
    e_V = s_V / n
    return {
        "e_m": s_m / n,
        "e_inv_m": s_inv_m / n,
        "e_V": e_V,
        "var_V": (s_V2 - n * e_V**2) / (n - 1),
        "e_inv_V": s_inv_V / n,
    }


@dataclass(frozen=True, eq=False)
class DayMoments:
    """Moments for every information time of one day.

    Row ``t`` (0-based) holds what is known before interval ``t`` trades;
    matrix entries ``[t, tau]`` are defined for ``tau >= t`` and are NaN below
    the diagonal.
    """

    e_m: np.ndarray
    e_inv_m: np.ndarray
    e_m_sq: np.ndarray
    e_V: np.ndarray
    var_V: np.ndarray
    e_inv_V: np.ndarray
    e_inv_V_sq: np.ndarray

    @property
    def T(self) -> int:
        return self.e_V.size

    def at(self, t: int) -> VolumeMoments:
        return VolumeMoments(
            e_m=self.e_m[t, t:], e_inv_m=self.e_inv_m[t, t:], e_V=float(self.e_V[t]),
            var_V=float(self.var_V[t]), e_inv_V=float(self.e_inv_V[t]),
            e_m_sq=self.e_m_sq[t, t:], e_inv_V_sq=float(self.e_inv_V_sq[t]),
        )


def sequential_moments(model: VolumeModel, symbol: str, volumes: Sequence[float]) -> DayMoments:
    """Conditional moments for t = 1..T, revealing ``volumes`` one at a time.

    Equivalent to calling :func:`condition` and :func:`moments` at every t but
    in O(T^3) total, via in-place one-step Schur updates.  Row t only reads
    ``volumes[:t]``.
    """
    volumes = np.asarray(volumes, dtype=float)
    T = model.T
    if volumes.size != T:
        raise DataError(f"day has {volumes.size} intervals, model expects {T}")
    nu = model.mean(symbol).copy()
    cov = np.array(model.covariance)
    scale = max(float(np.max(np.diag(cov))), 1e-300)
    nan = np.full((T, T), np.nan)
    e_m, e_inv_m, e_m_sq = nan.copy(), nan.copy(), nan.copy()
    e_V, var_V = np.empty(T), np.empty(T)
    observed = 0.0
    try:
        with np.errstate(over="raise"):
            for t in range(T):
                sub = cov[t:, t:]
                d = np.diag(sub)
                a = np.exp(nu[t:] + d / 2)
                e_m[t, t:] = a
                e_inv_m[t, t:] = np.exp(-nu[t:] + d / 2)
                e_m_sq[t, t:] = np.exp(2 * nu[t:] + 2 * d)
                var_V[t] = a @ np.expm1(sub) @ a
                e_V[t] = observed + a.sum()
                if t == T - 1:
                    break
                m = volumes[t]
                if not m > 0:
                    raise DataError(f"{symbol}: volume at interval {t + 1} must be positive")
                observed += m
                p = cov[t, t]
                col = cov[t + 1:, t]
                if p > 1e-13 * scale:
                    gain = col / p
                    nu[t + 1:] += gain * (math.log(m) - nu[t])
                    cov[t + 1:, t + 1:] -= np.outer(gain, col)
                elif np.max(np.abs(col), initial=0.0) > 1e-12 * scale:
                    raise SingularConditioningError(
                        f"zero conditional variance at t={t + 1} with nonzero covariance", math.inf
                    )
    except FloatingPointError as exc:
        raise NumericalError(f"overflow in volume moments for {symbol}") from exc
    e_inv_V = 1.0 / e_V + var_V / e_V**3
    e_inv_V_sq = 1.0 / e_V**2 + 3.0 * var_V / e_V**4
    return DayMoments(e_m=e_m, e_inv_m=e_inv_m, e_m_sq=e_m_sq, e_V=e_V, var_V=var_V,
                      e_inv_V=e_inv_V, e_inv_V_sq=e_inv_V_sq)

"""Open-loop (static) VWAP schedules.

The optimization runs on the fractions ``v = u / C`` so that the feasible set
is the unit simplex.  In those units the objective is

    sum_t (s_t/2) (alpha C kappa_t v_t^2 - v_t)
        + lam sum_t sigma_t^2 (W_t^2 - 2 M_t W_t),     W_t = sum_{tau<t} v_tau.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .slippage import Method, Schedule


@dataclass(frozen=True, eq=False)
class StaticProblem:
    C: float
    spread: np.ndarray
    alpha: float
    sigma2: np.ndarray
    M: np.ndarray
    kappa: np.ndarray
    lam: float

    def __post_init__(self):
        arrays = {}
        for name in ("spread", "sigma2", "M", "kappa"):
            a = np.array(getattr(self, name), dtype=float)
            a.flags.writeable = False
            arrays[name] = a
            object.__setattr__(self, name, a)
        T = arrays["M"].size
        if any(a.shape != (T,) for a in arrays.values()):
            raise ValueError("spread, sigma2, M and kappa must have the same length")
        if not self.C > 0:
            raise ValueError("order size must be positive")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("static problems take a finite non-negative risk aversion")
        M = arrays["M"]
        if M[0] != 0 or np.any(np.diff(M) < 0) or M[-1] > 1 + 1e-12:
            raise ValueError("M must start at 0, be non-decreasing and stay <= 1")
        if np.any(arrays["kappa"] <= 0):
            raise ValueError("kappa must be strictly positive")
        if np.any(arrays["sigma2"] < 0) or np.any(arrays["spread"] < 0) or self.alpha < 0:
            raise ValueError("sigma2, spread and alpha must be non-negative")

    @property
    def T(self) -> int:
        return self.M.size

    @property
    def frac(self) -> np.ndarray:
        """Expected volume fractions implied by M (with M_{T+1} = 1)."""
        return np.diff(np.append(self.M, 1.0))

    @classmethod
    def from_profile(cls, frac, sigma2, costs, C, lam, expected_volume):
        """Problem with ``M`` from the fraction profile and ``kappa = 1/E[m_t]``,
        ``E[m_t]`` approximated by ``frac_t * E[V]``."""
        frac = np.asarray(frac, dtype=float)
        M = np.concatenate([[0.0], np.cumsum(frac)[:-1]])
        M = np.minimum(M, 1.0)
        return cls(C=C, spread=costs.spread, alpha=costs.alpha, sigma2=sigma2, M=M,
                   kappa=1.0 / (frac * expected_volume), lam=lam)

    # -- objective in fraction units ------------------------------------
    def _diag(self) -> np.ndarray:
        return self.spread * self.alpha * self.C * self.kappa

    def objective(self, v: np.ndarray) -> float:
        W = np.concatenate([[0.0], np.cumsum(v)[:-1]])
        cost = np.sum(self.spread / 2 * (self.alpha * self.C * self.kappa * v**2 - v))
        track = self.lam * np.sum(self.sigma2 * (W**2 - 2 * self.M * W))
        return float(cost + track)

    def objective_scale(self) -> float:
        """Magnitude of the objective's terms at a typical feasible point."""
        v = np.full(self.T, 1.0 / self.T)
        W = np.arange(self.T) / self.T
        cost = np.abs(self.spread / 2 * (self.alpha * self.C * self.kappa * v**2 + v))
        track = self.lam * self.sigma2 * (W**2 + 2 * self.M * W)
        return float(np.sum(cost) + np.sum(track))

    def gradient(self, v: np.ndarray) -> np.ndarray:
        W = np.concatenate([[0.0], np.cumsum(v)[:-1]])
        r = self.sigma2 * (W - self.M)
        # d W_t / d v_j = 1 for j < t
        tail = np.concatenate([np.cumsum(r[::-1])[::-1][1:], [0.0]])
        return self._diag() * v - self.spread / 2 + 2 * self.lam * tail

    def hessian_vector(self, z: np.ndarray) -> np.ndarray:
        Z = np.concatenate([[0.0], np.cumsum(z)[:-1]])
        r = self.sigma2 * Z
        tail = np.concatenate([np.cumsum(r[::-1])[::-1][1:], [0.0]])
        return self._diag() * z + 2 * self.lam * tail


def project_simplex(y: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = total}`` (sort-based)."""
    n = y.size
    srt = np.sort(y)[::-1]
    css = np.cumsum(srt) - total
    k = np.arange(1, n + 1)
    rho = np.flatnonzero(srt - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(y - theta, 0.0)


def closed_form_static(frac, C: float) -> Schedule:
    """Trade each interval's expected share of daily volume."""
    frac = np.asarray(frac, dtype=float)
    if np.any(frac < 0):
        raise ValueError("volume fractions must be non-negative")
    if abs(frac.sum() - 1.0) > 1e-9:
        raise ValueError(f"volume fractions sum to {frac.sum():.12g}, not 1")
    return Schedule(u=C * frac, method=Method.STATIC_CLOSED_FORM, order_size=C)


def lipschitz_bound(problem: StaticProblem, iters: int = 100) -> float:
    """Largest Hessian eigenvalue by power iteration, padded by 5%."""
    T = problem.T
    z = 1.0 + np.linspace(0.0, 1.0, T)
    z /= np.linalg.norm(z)
    est = 0.0
    for _ in range(iters):
        w = problem.hessian_vector(z)
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        est = norm
        z = w / norm
    return 1.05 * est


@dataclass
class QPResult:
    schedule: Schedule
    v: np.ndarray
    iterations: int
    residual: float
    objective_history: list


def kkt_residual(problem: StaticProblem, v: np.ndarray, step: float) -> float:
    """Infinity norm of the projected-gradient mapping, in fraction units."""
    return float(np.max(np.abs(v - project_simplex(v - step * problem.gradient(v)))))


def solve_qp(problem: StaticProblem, tol: float = 1e-11, max_iter: int = 200_000,
             x0=None, check_every: int = 10) -> QPResult:
    """Minimize the static objective over the scaled simplex.

    Monotone FISTA with adaptive restart and exact projection.  Returns once
    the projected-gradient residual drops below ``tol``; raises
    :class:`ConvergenceError` otherwise.
    """
    T = problem.T
    if not np.any(problem.spread) and problem.lam == 0:
        sched = closed_form_static(problem.frac, problem.C)
        sched = Schedule(u=sched.u, method=Method.STATIC_QP, order_size=problem.C,
                         lam=problem.lam, flags=("degenerate-objective",))
        return QPResult(sched, sched.u / problem.C, 0, 0.0, [])

    lip = lipschitz_bound(problem)
    if lip <= 0:
        lip = 1.0
    x = project_simplex(np.full(T, 1.0 / T) if x0 is None else np.asarray(x0, float))
    fx = problem.objective(x)
    y, t_mom = x.copy(), 1.0
    history = [fx]
    residual = np.inf
    fscale = problem.objective_scale()
    for it in range(1, max_iter + 1):
        gy = problem.gradient(y)
        fy = problem.objective(y)
        while True:
            z = project_simplex(y - gy / lip)
            d = z - y
            fz = problem.objective(z)
            if fz <= fy + gy @ d + 0.5 * lip * (d @ d) + 1e-15 * abs(fy):
                break
            lip *= 2.0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        # accept ties within evaluation rounding so the iteration cannot stall
        if fz <= fx + 64 * np.finfo(float).eps * fscale:
            x_new, f_new = z, fz
        else:
            x_new, f_new = x, fx
        if (y - z) @ (z - x) > 0 or x_new is x:
            # gradient-based restart
            y, t_new = x_new.copy(), 1.0
        else:
            y = x_new + (t_mom / t_new) * (z - x_new) + ((t_mom - 1.0) / t_new) * (x_new - x)
        x, fx, t_mom = x_new, f_new, t_new
        history.append(fx)
        if it % check_every == 0:
            residual = kkt_residual(problem, x, 1.0 / lip)
            if residual <= tol:
                break
    else:
        residual = kkt_residual(problem, x, 1.0 / lip)
        if residual > tol:
            raise ConvergenceError(f"static QP did not converge in {max_iter} iterations", residual)
    u = problem.C * x
    # exact feasibility: non-negative by projection; absorb rounding in the largest entry
    u[np.argmax(u)] += problem.C - u.sum()
    sched = Schedule(u=u, method=Method.STATIC_QP, order_size=problem.C, lam=problem.lam)
    return QPResult(sched, x, it, residual, history)

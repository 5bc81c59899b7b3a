import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import random_model
from vwapopt.errors import DataError, NumericalError, SingularConditioningError
from vwapopt.market_data import MinuteSeries
from vwapopt.volume_model import (
    ConditionalVolumeDist, VolumeModel, condition, estimate_b, estimate_covariance, estimate_mu,
    fit_volume_model, fit_volume_models, moments, monte_carlo_moments, psd_shift_for,
    sequential_moments, unconditional,
)

D0 = dt.date(2020, 1, 6)


def _series(logs, symbol="A", day=0):
    logs = np.asarray(logs, dtype=float)
    return MinuteSeries(symbol, D0 + dt.timedelta(days=day), np.exp(logs), np.ones(logs.size))




# -- estimation ----------------------------------------------------------------

def test_estimate_b_constant():
    assert estimate_b([_series(np.full(5, 4.0))]) == pytest.approx(4.0, abs=1e-15)


def test_estimate_b_hand():
    assert estimate_b([_series([1, 2]), _series([3, 4], day=1)]) == pytest.approx(2.5)


def test_estimate_b_rejects_zero_volume():
    s = MinuteSeries("A", D0, [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(DataError):
        estimate_b([s])


def test_estimate_mu_examples():
    w = [_series(np.full(4, 3.0))]
    np.testing.assert_allclose(estimate_mu(w, {"A": estimate_b(w)}), 0.0, atol=1e-15)
    np.testing.assert_allclose(estimate_mu([_series([1, 3])], {"A": 2.0}), [-1.0, 1.0])
    with pytest.raises(DataError, match="no level"):
        estimate_mu(w, {"B": 1.0})


def test_estimate_mu_level_invariance(rng):
    shape = rng.normal(size=6)
    one = [_series(shape + 2.0, "A")]
    two = one + [_series(shape + 5.0, "B")]
    b1 = {"A": estimate_b(one)}
    b2 = {"A": b1["A"], "B": estimate_b(two[1:])}
    np.testing.assert_allclose(estimate_mu(two, b2), estimate_mu(one, b1), atol=1e-12)


def test_estimate_mu_sums_to_zero(rng):
    w = [_series(rng.normal(4, 1, 30), k, d) for d in range(5) for k in "AB"]
    b = {k: estimate_b([s for s in w if s.symbol == k]) for k in "AB"}
    assert abs(estimate_mu(w, b).sum()) < 1e-9


def test_covariance_rank_one_input():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    X = np.zeros((4, 5))
    X[:, 2] = v
    f, S = estimate_covariance(X, 1)
    assert abs(abs(f @ v) / (np.linalg.norm(f) * np.linalg.norm(v)) - 1) < 1e-12
    np.testing.assert_allclose(np.outer(f, f), np.outer(v, v) / 4, atol=1e-12)
    np.testing.assert_allclose(S, 0.0, atol=1e-12)


def test_covariance_band_zero(rng):
    X = rng.normal(size=(5, 30))
    f, S = estimate_covariance(X, 0)
    sample = X @ X.T / 29
    np.testing.assert_allclose(np.diag(S), np.diag(sample) - f**2, atol=1e-12)
    assert np.count_nonzero(S - np.diag(np.diag(S))) == 0


def test_covariance_in_band_reproduction_and_optimality(rng):
    X = rng.normal(size=(6, 40))
    f, S = estimate_covariance(X, 2)
    sample = X @ X.T / 39
    idx = np.arange(6)
    band = np.abs(idx[:, None] - idx[None, :]) <= 2
    np.testing.assert_allclose((np.outer(f, f) + S)[band], sample[band], atol=1e-12)
    best = np.linalg.norm(sample - np.outer(f, f))
    for _ in range(100):
        g = rng.normal(size=6) * np.sqrt(np.linalg.norm(sample))
        assert best <= np.linalg.norm(sample - np.outer(g, g))


def test_covariance_errors():
    with pytest.raises(DataError):
        estimate_covariance(np.zeros((3, 4)), 1)
    with pytest.raises(DataError):
        estimate_covariance(np.ones((3, 1)), 1)


def test_psd_shift():
    cov = np.diag([1.0, -0.01, 1.0])
    shift = psd_shift_for(cov)
    assert shift > 0.01
    np.linalg.cholesky(cov + shift * np.eye(3))
    # the previous element of the doubling sequence fails
    with pytest.raises(np.linalg.LinAlgError):
        np.linalg.cholesky(cov + shift / 2 * np.eye(3))
    assert psd_shift_for(np.eye(3)) == 0.0


def test_fit_records_shift_and_shares_work(data20):
    window = list(data20.window(0, 20).series.values())
    models = fit_volume_models(window, [0, 3, 10])
    assert {m.band_b for m in models.values()} == {0, 3, 10}
    assert models[0].b == models[3].b
    np.testing.assert_array_equal(models[0].factor_f, models[10].factor_f)
    for m in models.values():
        assert m.is_positive_definite()
        assert abs(m.mu.sum()) < 1e-9


def test_json_round_trip(data20):
    m = fit_volume_model(list(data20.window(0, 20).series.values()), 3)
    back = VolumeModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.mu, m.mu)
    np.testing.assert_array_equal(back.factor_f, m.factor_f)
    np.testing.assert_array_equal(back.banded_S, m.banded_S)
    assert back.b == m.b and back.psd_shift == m.psd_shift and back.band_b == 3


def test_model_invariants():
    T = 3
    with pytest.raises(ValueError, match="sum to zero"):
        VolumeModel(np.ones(T), {"A": 0.0}, np.zeros(T), np.eye(T), 0)
    with pytest.raises(ValueError, match="outside bandwidth"):
        VolumeModel(np.zeros(T), {"A": 0.0}, np.zeros(T), np.ones((T, T)), 1)
    S = np.eye(T)
    S[0, 1] = 0.1
    with pytest.raises(ValueError, match="symmetric"):
        VolumeModel(np.zeros(T), {"A": 0.0}, np.zeros(T), S, 1)


# -- conditioning ----------------------------------------------------------------

def test_condition_unconditional(rng):
    m = random_model(rng, 5)
    d = condition(m, "A", [])
    np.testing.assert_array_equal(d.nu, m.mean("A"))
    np.testing.assert_array_equal(d.sigma, m.covariance)
    assert d.t == 1


def test_condition_diagonal_ignores_observations():
    T = 4
    m = VolumeModel(np.zeros(T), {"A": 2.0}, np.zeros(T), np.diag([0.1, 0.2, 0.3, 0.4]), 0)
    d = condition(m, "A", [100.0, 0.01])
    np.testing.assert_allclose(d.nu, [2.0, 2.0])
    np.testing.assert_allclose(d.sigma, np.diag([0.3, 0.4]))
    assert d.observed_sum == pytest.approx(100.01)


def test_condition_matches_precision_oracle(rng):
    m = random_model(rng, 4, band=3)
    obs = np.exp(rng.normal(4, 1, 2))
    d = condition(m, "A", obs)
    # Gaussian conditional from the joint precision: Sigma_{2|1} = P22^{-1}
    P = np.linalg.inv(m.covariance)
    P22 = P[2:, 2:]
    x1 = np.log(obs) - m.mean("A")[:2]
    nu = m.mean("A")[2:] - np.linalg.solve(P22, P[2:, :2] @ x1)
    np.testing.assert_allclose(d.sigma, np.linalg.inv(P22), rtol=1e-10)
    np.testing.assert_allclose(d.nu, nu, rtol=1e-10)


def test_condition_sequential_consistency(rng):
    m = random_model(rng, 8)
    obs = np.exp(rng.normal(4, 1, 6))
    d = condition(m, "A", obs[:3])
    for x in obs[3:]:
        d = d.observe(x)
    direct = condition(m, "A", obs)
    np.testing.assert_allclose(d.nu, direct.nu, rtol=1e-8)
    np.testing.assert_allclose(d.sigma, direct.sigma, rtol=1e-8, atol=1e-12)
    assert d.t == direct.t == 7


def test_condition_singular_block():
    T = 3
    f = np.array([1.0, 1.0, 1.0])
    m = VolumeModel(np.zeros(T), {"A": 0.0}, f, np.zeros((T, T)), 0)
    with pytest.raises(SingularConditioningError) as exc:
        condition(m, "A", [1.0, 2.0])
    assert exc.value.condition_number > 1e8


def test_condition_errors(rng):
    m = random_model(rng, 3)
    with pytest.raises(DataError):
        condition(m, "A", [1.0, 0.0])
    with pytest.raises(DataError):
        condition(m, "ZZ", [])
    with pytest.raises(ValueError):
        condition(m, "A", [1.0, 1.0, 1.0])


# -- moments ------------------------------------------------------------------

def test_moments_zero_variance():
    d = ConditionalVolumeDist(nu=np.log([100.0, 100.0]), sigma=np.zeros((2, 2)), t=1)
    mo = moments(d)
    np.testing.assert_allclose(mo.e_m, [100, 100])
    assert mo.e_V == pytest.approx(200) and mo.var_V == 0 and mo.e_inv_V == pytest.approx(1 / 200)


def test_moments_univariate():
    mo = moments(ConditionalVolumeDist(nu=np.zeros(1), sigma=np.ones((1, 1)), t=1))
    assert mo.e_m[0] == pytest.approx(math.exp(0.5))
    assert mo.e_inv_m[0] == pytest.approx(math.exp(0.5))


def test_moments_product_identity(rng):
    d = condition(random_model(rng, 6), "A", np.exp(rng.normal(4, 1, 2)))
    mo = moments(d)
    np.testing.assert_allclose(mo.e_m * mo.e_inv_m, np.exp(np.diag(d.sigma)), rtol=1e-12)
    assert np.all(mo.e_m * mo.e_inv_m >= 1)
    assert mo.e_V >= d.observed_sum


def test_moments_monte_carlo(rng):
    d = unconditional(random_model(rng, 5), "A")
    mo = moments(d)
    mc = monte_carlo_moments(d, 1_000_000, seed=3)
    for key in ("e_m", "e_inv_m", "e_V", "var_V"):
        np.testing.assert_allclose(getattr(mo, key), mc[key], rtol=0.02, err_msg=key)
    assert mo.e_inv_V == pytest.approx(mc["e_inv_V"], rel=0.05)


def test_moments_overflow():
    d = ConditionalVolumeDist(nu=np.array([800.0]), sigma=np.ones((1, 1)), t=1)
    with pytest.raises(NumericalError):
        moments(d)


def test_sequential_moments_match_direct(rng):
    m = random_model(rng, 9)
    vols = np.exp(rng.normal(4, 1, 9))
    dm = sequential_moments(m, "A", vols)
    for t in (0, 1, 4, 8):
        mo = moments(condition(m, "A", vols[:t]))
        got = dm.at(t)
        for key in ("e_m", "e_inv_m", "e_m_sq"):
            np.testing.assert_allclose(getattr(got, key), getattr(mo, key), rtol=1e-9)
        for key in ("e_V", "var_V", "e_inv_V", "e_inv_V_sq"):
            assert getattr(got, key) == pytest.approx(getattr(mo, key), rel=1e-9)


def test_sequential_moments_causal(rng):
    m = random_model(rng, 7)
    vols = np.exp(rng.normal(4, 1, 7))
    a = sequential_moments(m, "A", vols)
    poisoned = vols.copy()
    poisoned[4:] = 1e6
    b = sequential_moments(m, "A", poisoned)
    # row t only reads volumes[:t]
    np.testing.assert_array_equal(a.e_V[:5], b.e_V[:5])
    np.testing.assert_array_equal(a.e_m[:5], b.e_m[:5])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_conditional_variance_shrinks(T, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, T, band=1)
    d = unconditional(m, "A")
    before = np.diag(d.sigma)[1:]
    after = np.diag(d.observe(50.0).sigma)
    assert np.all(after <= before + 1e-12)

import json

import numpy as np
import pytest

from conftest import FUTURES_TENORS, random_params
from oracles import a_function_limit, a_function_terms, euler_ou_paths
from ssfr.data import Tenor
from ssfr.model import (
    ModelParams,
    ParamError,
    a_function,
    build_matrices,
    fr_measurement_mean,
    measurement,
    simulate,
    state_transition,
)


def _scalars(p: ModelParams):
    return (p.kappa_chi, p.kappa_xi, p.mu_xi, p.sigma_chi, p.sigma_xi, p.rho, p.lambda_chi, p.lambda_xi)


def test_a_function_zero(base_params):
    assert a_function(base_params, 0.0) == 0.0


def test_a_function_long_horizon_limit(base_params):
    limit = a_function_limit(*_scalars(base_params))
    assert a_function(base_params, 1000.0) == pytest.approx(limit, rel=1e-9)


@pytest.mark.parametrize("tau", [0.5, 1 / 12, 3.0])
def test_a_function_matches_term_by_term_oracle(tau):
    p = random_params(np.random.default_rng(5), 3)
    assert a_function(p, tau) == pytest.approx(a_function_terms(*_scalars(p), tau), rel=1e-13, abs=1e-15)


def test_a_function_vectorised(base_params):
    tau = np.array([0.0, 0.25, 1.0])
    out = a_function(base_params, tau)
    np.testing.assert_allclose(out, [a_function(base_params, t) for t in tau], rtol=0, atol=0)
    with pytest.raises(ParamError):
        a_function(base_params, -0.1)


def test_param_invariants(base_params):
    with pytest.raises(ParamError, match="kappa_chi must exceed"):
        base_params.replace(kappa_chi=0.2)
    with pytest.raises(ParamError, match="rho"):
        base_params.replace(rho=1.0)
    with pytest.raises(ParamError):
        base_params.replace(meas_std=np.zeros(12))
    with pytest.raises(ParamError, match="Gamma"):
        base_params.replace(Gamma=np.zeros((3, 2)))
    assert base_params.Q == 0 and base_params.Gamma.shape == (12, 0)


def test_params_json_round_trip():
    p = random_params(np.random.default_rng(1), 4, Q=2)
    text = json.dumps(p.to_dict())
    d = json.loads(text)
    assert set(d) == {"kappa_chi", "kappa_xi", "mu_xi", "sigma_chi", "sigma_xi", "rho",
                      "lambda_chi", "lambda_xi", "meas_std", "Gamma", "Q"}
    q = ModelParams.from_dict(d)
    assert _scalars(q) == _scalars(p)
    np.testing.assert_array_equal(q.Gamma, p.Gamma)
    np.testing.assert_array_equal(q.meas_std, p.meas_std)


def test_state_transition_small_dt_limit(base_params):
    C, E, Sv = state_transition(base_params, 1e-10)
    np.testing.assert_allclose(E, np.eye(2), atol=1e-8)
    np.testing.assert_allclose(C, 0.0, atol=1e-8)
    np.testing.assert_allclose(Sv, 0.0, atol=1e-8)


def test_state_transition_formulas(base_params):
    p = base_params
    dt = 1 / 12
    C, E, Sv = state_transition(p, dt)
    assert C[0] == 0.0
    assert C[1] == pytest.approx(p.mu_xi / p.kappa_xi * (1 - np.exp(-p.kappa_xi * dt)), rel=1e-14)
    assert Sv[0, 0] == pytest.approx(p.sigma_chi**2 * (1 - np.exp(-2 * p.kappa_chi * dt)) / (2 * p.kappa_chi), rel=1e-14)
    assert Sv[0, 1] == Sv[1, 0]
    assert np.all((np.diag(E) > 0) & (np.diag(E) < 1))
    _, _, Sv0 = state_transition(p.replace(rho=0.0), dt)
    assert Sv0[0, 1] == 0.0 and Sv0[1, 0] == 0.0


def test_sigma_v_chi_variance_against_sde_monte_carlo():
    p = ModelParams(1.5, 0.2, 0.8, 0.4, 0.25, -0.4, 0.0, 0.0, [0.01])
    dt = 1 / 12
    n = 1_000_000
    chi, xi = euler_ou_paths((0.0, 4.0), (p.kappa_chi, p.kappa_xi), p.mu_xi, (p.sigma_chi, p.sigma_xi), p.rho,
                             dt, n, 100, np.random.default_rng(2024))
    _, _, Sv = state_transition(p, dt)
    var = np.var(chi)
    se = Sv[0, 0] * np.sqrt(2.0 / n)
    assert abs(var - Sv[0, 0]) < 3 * se


@pytest.mark.parametrize("seed", range(5))
def test_sigma_v_spd(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 2)
    for dt in (1e-6, 1 / 52, 1 / 12, 1.0, 10.0):
        np.linalg.cholesky(state_transition(p, dt)[2])


def test_measurement_zero_tenor_prices_spot(base_params):
    p = ModelParams(1.2, 0.25, 1.0, 0.35, 0.2, 0.3, 0.05, 0.02, [0.01, 0.02])
    D, F, Sw = measurement(p, np.array([0.0, 0.5]))
    assert D[0] == 0.0
    np.testing.assert_array_equal(F[0], [1.0, 1.0])
    np.testing.assert_array_equal(Sw, np.diag([1e-4, 4e-4]))


def test_measurement_loadings(base_params):
    _, F, _ = measurement(base_params, FUTURES_TENORS)
    assert np.all(np.diff(F[:, 0]) < 0) and np.all(np.diff(F[:, 1]) < 0)
    fast = base_params.replace(kappa_chi=60.0)
    _, F_fast, _ = measurement(fast, FUTURES_TENORS)
    assert F_fast[-1, 0] < 1e-25
    with pytest.raises(ParamError, match="ascending"):
        measurement(ModelParams(1.2, 0.25, 1.0, 0.35, 0.2, 0.3, 0.0, 0.0, [0.1, 0.1]), [Tenor(3), Tenor(1)])


def test_measurement_equals_futures_formula(base_params):
    rng = np.random.default_rng(9)
    D, F, _ = measurement(base_params, FUTURES_TENORS)
    p = base_params
    for _ in range(20):
        x = rng.normal([0, 4], [0.3, 0.5])
        for i, t in enumerate(FUTURES_TENORS):
            tau = t.years
            direct = a_function(p, tau) + np.exp(-p.kappa_chi * tau) * x[0] + np.exp(-p.kappa_xi * tau) * x[1]
            assert D[i] + F[i] @ x == pytest.approx(direct, abs=1e-12)


def test_fr_measurement_mean(base_params):
    m = build_matrices(base_params, FUTURES_TENORS, 1 / 12)
    x = np.array([0.1, 4.0])
    ss = m.D + m.F @ x
    np.testing.assert_array_equal(fr_measurement_mean(m, x, np.zeros((12, 2)), [0.3, -1.0]), ss)
    np.testing.assert_array_equal(fr_measurement_mean(m, x, np.ones((12, 2)), [0.0, 0.0]), ss)
    np.testing.assert_allclose(fr_measurement_mean(m, x, np.ones((12, 1)), [0.5]), ss + 0.5, atol=1e-15)
    with pytest.raises(ValueError):
        fr_measurement_mean(m, x, np.ones((11, 1)), [0.5])


def test_simulate_noiseless_follows_mean_path(base_params):
    p = base_params.replace(sigma_chi=1e-12, sigma_xi=1e-12, meas_std=np.full(12, 1e-12))
    panel, states = simulate(p, FUTURES_TENORS, 50, x0=[0.3, 3.5], seed=1)
    m = build_matrices(p, FUTURES_TENORS, 1 / 12)
    x = np.array([0.3, 3.5])
    for t in range(50):
        x = m.C + m.E @ x
        np.testing.assert_allclose(states[t], x, atol=1e-8)
        np.testing.assert_allclose(panel.log_prices[t], m.D + m.F @ x, atol=1e-8)


def test_simulate_long_run_mean_of_xi():
    p = ModelParams(3.0, 1.0, 0.5, 0.3, 0.2, 0.0, 0.0, 0.0, [0.01])
    _, states = simulate(p, (Tenor(1),), 60_000, seed=3)
    # stationary sd of xi is 0.2/sqrt(2) ~ 0.14; monthly autocorrelation exp(-1/12) inflates the
    # standard error of the mean by sqrt((1+phi)/(1-phi)) ~ 4.9
    se = 0.2 / np.sqrt(2) * 4.9 / np.sqrt(60_000)
    assert abs(states[:, 1].mean() - 0.5) < 4 * se


def test_simulate_deterministic_and_requires_scores(base_params):
    a = simulate(base_params, FUTURES_TENORS, 30, seed=42)
    b = simulate(base_params, FUTURES_TENORS, 30, seed=42)
    np.testing.assert_array_equal(a[0].log_prices, b[0].log_prices)
    np.testing.assert_array_equal(a[1], b[1])
    fr = base_params.replace(Gamma=np.ones((12, 2)))
    with pytest.raises(ParamError, match="u_series"):
        simulate(fr, FUTURES_TENORS, 30, seed=1)


def test_simulated_transitions_match_sigma_v(base_params):
    p = base_params.replace(rho=0.6)
    n = 100_000
    _, states = simulate(p, FUTURES_TENORS, n, seed=8)
    C, E, Sv = state_transition(p, 1 / 12)
    noise = states[1:] - C - states[:-1] @ E.T
    emp = np.cov(noise.T, bias=True)
    for i in range(2):
        for j in range(2):
            se = np.sqrt((Sv[i, i] * Sv[j, j] + Sv[i, j] ** 2) / n)
            assert abs(emp[i, j] - Sv[i, j]) < 3 * se

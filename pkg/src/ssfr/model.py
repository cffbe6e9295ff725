"""Two-factor (short-term / long-term) log-price model in state-space form.

Time is measured in years.  The state ``X = (chi, xi)`` follows two
correlated Ornstein-Uhlenbeck processes, discretised exactly, and the log
futures price at tenor ``tau`` is ``A(tau) + exp(-kappa_chi tau) chi +
exp(-kappa_xi tau) xi`` plus, in the functional-regression variant, a linear
term ``Gamma @ u_t`` in the yield-curve factor scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .data import FuturesPanel, Tenor, YieldPanel, month_range, tenor_years


class ParamError(ValueError):
    pass


def _one_minus_exp(x):
    # 1 - exp(-x), accurate for small x
    return -np.expm1(-np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ModelParams:
    kappa_chi: float
    kappa_xi: float
    mu_xi: float
    sigma_chi: float
    sigma_xi: float
    rho: float
    lambda_chi: float
    lambda_xi: float
    meas_std: np.ndarray
    Gamma: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        meas = np.array(self.meas_std, dtype=float, ndmin=1)
        P = meas.size
        G = np.zeros((P, 0)) if self.Gamma is None else np.array(self.Gamma, dtype=float)
        if G.ndim == 1 and G.size == 0:
            G = G.reshape(P, 0)
        object.__setattr__(self, "meas_std", meas)
        object.__setattr__(self, "Gamma", G)
        scalars = (self.kappa_chi, self.kappa_xi, self.mu_xi, self.sigma_chi, self.sigma_xi,
                   self.rho, self.lambda_chi, self.lambda_xi)
        if not all(np.isfinite(scalars)) or not np.all(np.isfinite(meas)) or not np.all(np.isfinite(G)):
            raise ParamError("parameters must be finite")
        if not self.kappa_xi > 0:
            raise ParamError("kappa_xi must be positive")
        if not self.kappa_chi > self.kappa_xi:
            raise ParamError("kappa_chi must exceed kappa_xi")
        if not (self.sigma_chi > 0 and self.sigma_xi > 0):
            raise ParamError("volatilities must be positive")
        if not abs(self.rho) < 1:
            raise ParamError("rho must lie in (-1, 1)")
        if not np.all(meas > 0):
            raise ParamError("measurement standard deviations must be positive")
        if G.ndim != 2 or G.shape[0] != P:
            raise ParamError(f"Gamma must have {P} rows, got shape {G.shape}")

    @property
    def P(self) -> int:
        return self.meas_std.size

    @property
    def Q(self) -> int:
        return self.Gamma.shape[1]

    def replace(self, **changes: Any) -> "ModelParams":
        d = {k: getattr(self, k) for k in _FIELDS}
        d.update(changes)
        return ModelParams(**d)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {k: float(getattr(self, k)) for k in _SCALARS}
        d["meas_std"] = self.meas_std.tolist()
        d["Gamma"] = self.Gamma.tolist()
        d["Q"] = self.Q
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        meas = np.asarray(d["meas_std"], dtype=float)
        Q = int(d.get("Q", 0))
        G = np.asarray(d.get("Gamma", []), dtype=float).reshape(meas.size, Q)
        return cls(**{k: float(d[k]) for k in _SCALARS}, meas_std=meas, Gamma=G)


_SCALARS = ("kappa_chi", "kappa_xi", "mu_xi", "sigma_chi", "sigma_xi", "rho", "lambda_chi", "lambda_xi")
_FIELDS = _SCALARS + ("meas_std", "Gamma")


@dataclass(frozen=True)
class StateSpaceMatrices:
    C: np.ndarray
    E: np.ndarray
    Sigma_v: np.ndarray
    D: np.ndarray
    F: np.ndarray
    Sigma_w: np.ndarray


def a_function(params: ModelParams, tau):
    """Deterministic part of the log futures price at time-to-maturity ``tau`` (years)."""
    p = params
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ParamError("tau must be non-negative")
    k_sum = p.kappa_chi + p.kappa_xi
    drift = (-p.lambda_chi / p.kappa_chi * _one_minus_exp(p.kappa_chi * tau)
             + (p.mu_xi - p.lambda_xi) / p.kappa_xi * _one_minus_exp(p.kappa_xi * tau))
    var = (_one_minus_exp(2 * p.kappa_chi * tau) / (2 * p.kappa_chi) * p.sigma_chi**2
           + _one_minus_exp(2 * p.kappa_xi * tau) / (2 * p.kappa_xi) * p.sigma_xi**2
           + 2 * _one_minus_exp(k_sum * tau) / k_sum * p.sigma_chi * p.sigma_xi * p.rho)
    out = drift + 0.5 * var
    return float(out) if out.ndim == 0 else out


def state_transition(params: ModelParams, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact one-step VAR(1) coefficients ``(C, E, Sigma_v)`` for step ``dt``."""
    if not dt > 0:
        raise ParamError("dt must be positive")
    p = params
    k_sum = p.kappa_chi + p.kappa_xi
    C = np.array([0.0, p.mu_xi / p.kappa_xi * _one_minus_exp(p.kappa_xi * dt)])
    E = np.diag([np.exp(-p.kappa_chi * dt), np.exp(-p.kappa_xi * dt)])
    v_chi = _one_minus_exp(2 * p.kappa_chi * dt) / (2 * p.kappa_chi) * p.sigma_chi**2
    v_xi = _one_minus_exp(2 * p.kappa_xi * dt) / (2 * p.kappa_xi) * p.sigma_xi**2
    cov = _one_minus_exp(k_sum * dt) / k_sum * p.sigma_chi * p.sigma_xi * p.rho
    Sigma_v = np.array([[v_chi, cov], [cov, v_xi]])
    return C, E, Sigma_v


def measurement(params: ModelParams, tenors: Sequence[Tenor] | np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Measurement intercept ``D``, loadings ``F`` and noise covariance ``Sigma_w``.

    ``tenors`` may be :class:`Tenor` objects or times to maturity in years.
    """
    tau = tenor_years(tenors)
    if np.any(np.diff(tau) <= 0):
        raise ParamError("tenors must be ascending")
    if tau.size != params.P:
        raise ParamError(f"{tau.size} tenors but {params.P} measurement standard deviations")
    D = np.atleast_1d(a_function(params, tau))
    F = np.column_stack([np.exp(-params.kappa_chi * tau), np.exp(-params.kappa_xi * tau)])
    Sigma_w = np.diag(params.meas_std**2)
    return D, F, Sigma_w


def build_matrices(params: ModelParams, tenors, dt: float) -> StateSpaceMatrices:
    C, E, Sigma_v = state_transition(params, dt)
    D, F, Sigma_w = measurement(params, tenors)
    return StateSpaceMatrices(C, E, Sigma_v, D, F, Sigma_w)


def fr_measurement_mean(matrices: StateSpaceMatrices, state, Gamma, u_t) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    u_t = np.atleast_1d(np.asarray(u_t, dtype=float))
    P = matrices.D.size
    if state.shape != (2,):
        raise ValueError(f"state must have length 2, got {state.shape}")
    if Gamma.shape != (P, u_t.size):
        raise ValueError(f"Gamma shape {Gamma.shape} does not match P={P}, Q={u_t.size}")
    return matrices.D + matrices.F @ state + Gamma @ u_t


def simulate(
    params: ModelParams,
    tenors: Sequence[Tenor],
    n_steps: int,
    dt: float = 1.0 / 12.0,
    u_series: np.ndarray | None = None,
    seed: int | np.random.SeedSequence | np.random.Generator = 0,
    x0=None,
    start: str = "2000-01",
) -> tuple[FuturesPanel, np.ndarray]:
    """Simulate log futures prices and the latent ``(chi, xi)`` path.

    States start at ``x0`` (default: the stationary mean ``(0, mu_xi/kappa_xi)``)
    and the first observation is taken one step later.  Returns the panel and
    an ``n_steps x 2`` state array.
    """
    if params.Q > 0:
        if u_series is None:
            raise ParamError("u_series is required when Q > 0")
        u_series = np.asarray(u_series, dtype=float)
        if u_series.shape != (n_steps, params.Q):
            raise ParamError(f"u_series must have shape {(n_steps, params.Q)}, got {u_series.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = build_matrices(params, tenors, dt)
    chol_v = np.linalg.cholesky(m.Sigma_v)
    x = np.array([0.0, params.mu_xi / params.kappa_xi]) if x0 is None else np.asarray(x0, dtype=float)

    z_state = rng.standard_normal((n_steps, 2))
    z_obs = rng.standard_normal((n_steps, params.P))
    states = np.empty((n_steps, 2))
    y = np.empty((n_steps, params.P))
    for t in range(n_steps):
        x = m.C + m.E @ x + chol_v @ z_state[t]
        states[t] = x
        y[t] = m.D + m.F @ x + params.meas_std * z_obs[t]
        if params.Q > 0:
            y[t] += params.Gamma @ u_series[t]
    panel = FuturesPanel(month_range(start, n_steps), tuple(tenors), y)
    return panel, states


def simulate_yield_curves(
    tenors: Sequence[Tenor],
    n_steps: int,
    seed: int | np.random.SeedSequence | np.random.Generator = 0,
    start: str = "2000-01",
) -> YieldPanel:
    """Synthetic yield panel from AR(1) level/slope/curvature factors.

    Only meant to feed the simulator and tests; not a calibrated rate model.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tau = tenor_years(tenors)
    decay = 0.5
    x = decay * np.maximum(tau, 1e-12)
    slope_load = (1 - np.exp(-x)) / x
    curve_load = slope_load - np.exp(-x)
    loads = np.column_stack([np.ones_like(tau), slope_load, curve_load])
    mean = np.array([0.025, -0.01, 0.0])
    phi = np.array([0.98, 0.95, 0.9])
    vol = np.array([0.002, 0.002, 0.003])
    f = mean.copy()
    Z = np.empty((tau.size, n_steps))
    for t in range(n_steps):
        f = mean + phi * (f - mean) + vol * rng.standard_normal(3)
        Z[:, t] = loads @ f
    return YieldPanel(month_range(start, n_steps), tuple(tenors), Z)

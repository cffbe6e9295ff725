"""Kalman filtering, exact Gaussian log-likelihood and maximum-likelihood fitting.

:func:`run_filter` is the reference forward pass built from
:func:`kalman_predict` and :func:`kalman_update`.  The optimiser calls
:func:`log_likelihood`, which runs the same recursion in a compiled loop;
the two agree to round-off and the test-suite checks that they do.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numba
import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .data import AlignedDataset
from .kpca import FactorScores
from .model import ModelParams, ParamError, StateSpaceMatrices, build_matrices

logger = logging.getLogger(__name__)

INFEASIBLE_PENALTY = 1e10


class FilterError(ArithmeticError):
    """Innovation covariance not positive definite, or non-finite filter values."""


@dataclass(frozen=True)
class FilterConfig:
    """Initial state moments; ``a0=None`` puts ``xi`` at the mean first-date log price."""

    a0: np.ndarray | None = None
    P0: np.ndarray = field(default_factory=lambda: np.diag([0.5, 0.5]))
    symmetrize: bool = True

    def __post_init__(self) -> None:
        P0 = np.asarray(self.P0, dtype=float)
        if P0.shape != (2, 2) or not np.allclose(P0, P0.T):
            raise ValueError("P0 must be a symmetric 2x2 matrix")
        try:
            np.linalg.cholesky(P0)
        except np.linalg.LinAlgError:
            raise ValueError("P0 must be positive definite") from None
        object.__setattr__(self, "P0", P0)
        if self.a0 is not None:
            object.__setattr__(self, "a0", np.asarray(self.a0, dtype=float).reshape(2))

    def initial_mean(self, y: np.ndarray) -> np.ndarray:
        if self.a0 is not None:
            return self.a0.copy()
        return np.array([0.0, float(np.mean(y[0]))])


@dataclass(frozen=True)
class FilterOutput:
    a_pred: np.ndarray
    P_pred: np.ndarray
    a_filt: np.ndarray
    P_filt: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray
    loglik: float


def kalman_predict(a, P, C, E, Sigma_v, symmetrize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    a_pred = C + E @ a
    P_pred = E @ P @ E.T + Sigma_v
    if symmetrize:
        P_pred = 0.5 * (P_pred + P_pred.T)
    return a_pred, P_pred


def kalman_update(a_pred, P_pred, y, D, F, Gamma, u_t, Sigma_w, symmetrize: bool = True):
    """Measurement update; returns ``(a, P, e, L)``.

    The gain is obtained from a Cholesky solve against ``L``; a
    :class:`FilterError` is raised when ``L`` is not positive definite.
    """
    e = y - D - F @ a_pred
    if Gamma is not None and np.size(Gamma):
        e = e - Gamma @ u_t
    L = F @ P_pred @ F.T + Sigma_w
    try:
        c = linalg.cho_factor(L, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise FilterError(f"innovation covariance not positive definite: {exc}") from None
    K = linalg.cho_solve(c, F @ P_pred).T
    a = a_pred + K @ e
    P = (np.eye(a_pred.size) - K @ F) @ P_pred
    if symmetrize:
        P = 0.5 * (P + P.T)
    return a, P, e, L


def _offsets(matrices: StateSpaceMatrices, Gamma: np.ndarray, scores: FactorScores | None, n: int) -> np.ndarray:
    off = np.broadcast_to(matrices.D, (n, matrices.D.size)).copy()
    if Gamma.shape[1] > 0:
        off += scores.U @ Gamma.T
    return off


def _check_scores(dataset: AlignedDataset, params: ModelParams, scores: FactorScores | None) -> None:
    if params.Q > 0:
        if scores is None:
            raise ValueError(f"factor scores are required for Q={params.Q}")
        if scores.Q != params.Q:
            raise ValueError(f"scores have Q={scores.Q}, params have Q={params.Q}")
        if not np.array_equal(scores.dates, dataset.dates):
            raise ValueError("factor score dates do not match the dataset")
    elif scores is not None and scores.Q > 0 and not np.array_equal(scores.dates, dataset.dates):
        raise ValueError("factor score dates do not match the dataset")


def run_filter(
    dataset: AlignedDataset,
    params: ModelParams,
    scores: FactorScores | None = None,
    config: FilterConfig | None = None,
) -> FilterOutput:
    """Full forward pass.  The log-likelihood omits the ``-NP/2 log(2 pi)`` constant."""
    config = config or FilterConfig()
    _check_scores(dataset, params, scores)
    y = dataset.y
    N, P = y.shape
    m = build_matrices(params, dataset.futures.tenors, dataset.dt)
    U = scores.U if params.Q > 0 else np.zeros((N, 0))

    a = config.initial_mean(y)
    Pc = config.P0.copy()
    out = dict(
        a_pred=np.empty((N, 2)), P_pred=np.empty((N, 2, 2)),
        a_filt=np.empty((N, 2)), P_filt=np.empty((N, 2, 2)),
        innovations=np.empty((N, P)), innovation_cov=np.empty((N, P, P)),
    )
    ll = 0.0
    for t in range(N):
        a_pred, P_pred = kalman_predict(a, Pc, m.C, m.E, m.Sigma_v, config.symmetrize)
        a, Pc, e, L = kalman_update(a_pred, P_pred, y[t], m.D, m.F, params.Gamma, U[t], m.Sigma_w, config.symmetrize)
        c = linalg.cho_factor(L, lower=True)
        ll -= 0.5 * (e @ linalg.cho_solve(c, e) + 2.0 * np.sum(np.log(np.diag(c[0]))))
        out["a_pred"][t], out["P_pred"][t] = a_pred, P_pred
        out["a_filt"][t], out["P_filt"][t] = a, Pc
        out["innovations"][t], out["innovation_cov"][t] = e, L
    if not np.isfinite(ll):
        raise FilterError("non-finite log-likelihood")
    return FilterOutput(loglik=float(ll), **out)


@numba.njit(cache=True, nogil=True)
def _loglik_core(y, off, C, E, Sv, F, sw2, a0, P0, symmetrize):
    N, P = y.shape
    a0_, a1 = a0[0], a0[1]
    p00, p01, p10, p11 = P0[0, 0], P0[0, 1], P0[1, 0], P0[1, 1]
    e00, e01, e10, e11 = E[0, 0], E[0, 1], E[1, 0], E[1, 1]
    L = np.empty((P, P))
    FP = np.empty((P, 2))
    z = np.empty(P)
    ll = 0.0
    for t in range(N):
        # predict
        ap0 = C[0] + e00 * a0_ + e01 * a1
        ap1 = C[1] + e10 * a0_ + e11 * a1
        m00 = e00 * p00 + e01 * p10
        m01 = e00 * p01 + e01 * p11
        m10 = e10 * p00 + e11 * p10
        m11 = e10 * p01 + e11 * p11
        q00 = m00 * e00 + m01 * e01 + Sv[0, 0]
        q01 = m00 * e10 + m01 * e11 + Sv[0, 1]
        q10 = m10 * e00 + m11 * e01 + Sv[1, 0]
        q11 = m10 * e10 + m11 * e11 + Sv[1, 1]
        if symmetrize:
            q01 = q10 = 0.5 * (q01 + q10)
        for i in range(P):
            FP[i, 0] = F[i, 0] * q00 + F[i, 1] * q10
            FP[i, 1] = F[i, 0] * q01 + F[i, 1] * q11
            z[i] = y[t, i] - off[t, i] - F[i, 0] * ap0 - F[i, 1] * ap1
        for i in range(P):
            for j in range(i + 1):
                L[i, j] = FP[i, 0] * F[j, 0] + FP[i, 1] * F[j, 1]
            L[i, i] += sw2[i]
        # in-place lower Cholesky of the innovation covariance
        for j in range(P):
            s = L[j, j]
            for k in range(j):
                s -= L[j, k] * L[j, k]
            if not s > 0.0:
                return -np.inf
            L[j, j] = np.sqrt(s)
            for i in range(j + 1, P):
                s = L[i, j]
                for k in range(j):
                    s -= L[i, k] * L[j, k]
                L[i, j] = s / L[j, j]
        # forward solves in place: z <- Lc^{-1} e, FP <- Lc^{-1} FP
        logdet = 0.0
        quad = 0.0
        g0 = 0.0
        g1 = 0.0
        h00 = 0.0
        h01 = 0.0
        h11 = 0.0
        for i in range(P):
            zi = z[i]
            f0 = FP[i, 0]
            f1 = FP[i, 1]
            for k in range(i):
                zi -= L[i, k] * z[k]
                f0 -= L[i, k] * FP[k, 0]
                f1 -= L[i, k] * FP[k, 1]
            d = L[i, i]
            zi /= d
            f0 /= d
            f1 /= d
            z[i] = zi
            FP[i, 0] = f0
            FP[i, 1] = f1
            logdet += 2.0 * np.log(d)
            quad += zi * zi
            g0 += f0 * zi
            g1 += f1 * zi
            h00 += f0 * f0
            h01 += f0 * f1
            h11 += f1 * f1
        ll -= 0.5 * (quad + logdet)
        # a = a_pred + P F' L^{-1} e ;  P = P_pred - (F P)' L^{-1} (F P)
        a0_ = ap0 + g0
        a1 = ap1 + g1
        p00 = q00 - h00
        p01 = q01 - h01
        p10 = q10 - h01
        p11 = q11 - h11
        if symmetrize:
            p01 = p10 = 0.5 * (p01 + p10)
    if not np.isfinite(ll):
        return -np.inf
    return ll


def log_likelihood(
    dataset: AlignedDataset,
    params: ModelParams,
    scores: FactorScores | None = None,
    config: FilterConfig | None = None,
) -> float:
    """Log-likelihood via the compiled recursion; ``-inf`` at infeasible points."""
    config = config or FilterConfig()
    _check_scores(dataset, params, scores)
    y = dataset.y
    try:
        m = build_matrices(params, dataset.futures.tenors, dataset.dt)
    except ParamError:
        return -np.inf
    off = _offsets(m, params.Gamma, scores, y.shape[0])
    with np.errstate(all="ignore"):
        return float(_loglik_core(
            np.ascontiguousarray(y), off, m.C, m.E, m.Sigma_v, np.ascontiguousarray(m.F),
            params.meas_std**2, config.initial_mean(y), config.P0, config.symmetrize,
        ))


# ---------------------------------------------------------------------------
# parameter transforms

_LOG_CLIP = 50.0
_KAPPA_CLIP = 15.0
_RHO_CLIP = 18.0


@dataclass(frozen=True)
class ParamLayout:
    """Shape information needed to unpack an unconstrained vector.

    ``groups[i]`` is the measurement-noise group of tenor ``i``; ``None``
    gives every tenor its own standard deviation.
    """

    P: int
    Q: int = 0
    groups: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.groups is not None:
            g = tuple(int(x) for x in self.groups)
            if len(g) != self.P:
                raise ValueError(f"groups must have length {self.P}")
            if sorted(set(g)) != list(range(len(set(g)))):
                raise ValueError("groups must be labelled 0..G-1")
            object.__setattr__(self, "groups", g)

    @property
    def n_noise(self) -> int:
        return self.P if self.groups is None else len(set(self.groups))

    @property
    def size(self) -> int:
        return 8 + self.n_noise + self.P * self.Q


def transform_params(params: ModelParams, layout: ParamLayout | None = None) -> np.ndarray:
    layout = layout or ParamLayout(params.P, params.Q)
    p = params
    if layout.groups is None:
        noise = np.log(p.meas_std)
    else:
        g = np.asarray(layout.groups)
        noise = np.array([np.log(p.meas_std[g == k][0]) for k in range(layout.n_noise)])
    head = [
        np.log(p.kappa_xi), np.log(p.kappa_chi - p.kappa_xi), p.mu_xi,
        np.log(p.sigma_chi), np.log(p.sigma_xi), np.arctanh(p.rho),
        p.lambda_chi, p.lambda_xi,
    ]
    return np.concatenate([head, noise, p.Gamma.ravel()])


def inverse_transform(z, layout: ParamLayout) -> ModelParams:
    """Map any finite vector to valid parameters.

    Log-scale and ``atanh`` components are clipped to ranges where the
    ordering and ``|rho| < 1`` survive floating-point rounding.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (layout.size,):
        raise ValueError(f"expected vector of length {layout.size}, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ParamError("non-finite component in unconstrained vector")
    kappa_xi = np.exp(np.clip(z[0], -_KAPPA_CLIP, _KAPPA_CLIP))
    kappa_chi = kappa_xi + np.exp(np.clip(z[1], -_KAPPA_CLIP, _KAPPA_CLIP))
    noise = np.exp(np.clip(z[8:8 + layout.n_noise], -_LOG_CLIP, _LOG_CLIP))
    meas = noise if layout.groups is None else noise[np.asarray(layout.groups)]
    return ModelParams(
        kappa_chi=float(kappa_chi),
        kappa_xi=float(kappa_xi),
        mu_xi=float(z[2]),
        sigma_chi=float(np.exp(np.clip(z[3], -_LOG_CLIP, _LOG_CLIP))),
        sigma_xi=float(np.exp(np.clip(z[4], -_LOG_CLIP, _LOG_CLIP))),
        rho=float(np.tanh(np.clip(z[5], -_RHO_CLIP, _RHO_CLIP))),
        lambda_chi=float(z[6]),
        lambda_xi=float(z[7]),
        meas_std=meas,
        Gamma=z[8 + layout.n_noise:].reshape(layout.P, layout.Q),
    )


# ---------------------------------------------------------------------------
# maximum likelihood


@dataclass(frozen=True)
class FitConfig:
    Q: int = 0
    n_starts: int = 8
    seed: int = 0
    max_iter: int = 40000
    tol: float = 1e-8
    groups: tuple[int, ...] | None = None
    dispersion: float = 0.5
    workers: int = 1
    filter: FilterConfig = field(default_factory=FilterConfig)
    start: ModelParams | None = None

    def __post_init__(self) -> None:
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.Q < 0:
            raise ValueError("Q must be non-negative")


@dataclass(frozen=True)
class StartTrace:
    start: np.ndarray
    loglik: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "start": [float(v) for v in self.start],
            "loglik": float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    loglik: float
    n_starts: int
    converged: bool
    trace: list[StartTrace]

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "loglik": float(self.loglik),
            "n_starts": self.n_starts,
            "converged": self.converged,
            "trace": [t.to_dict() for t in self.trace],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FitResult":
        return cls(
            params=ModelParams.from_dict(d["params"]),
            loglik=float(d["loglik"]),
            n_starts=int(d["n_starts"]),
            converged=bool(d["converged"]),
            trace=[StartTrace(np.asarray(t["start"]), t["loglik"], t["iterations"], t["converged"]) for t in d["trace"]],
        )


def heuristic_start(P: int, Q: int) -> ModelParams:
    return ModelParams(
        kappa_chi=1.5, kappa_xi=0.1, mu_xi=0.0, sigma_chi=0.3, sigma_xi=0.3, rho=0.0,
        lambda_chi=0.0, lambda_xi=0.0, meas_std=np.full(P, 0.05), Gamma=np.zeros((P, Q)),
    )


def start_points(base: ModelParams, n_starts: int, rng: np.random.Generator, dispersion: float = 0.5) -> list[ModelParams]:
    """``base`` itself followed by ``n_starts - 1`` lognormal perturbations of its positive entries."""
    starts = [base]
    for _ in range(n_starts - 1):
        m = np.exp(dispersion * rng.standard_normal(5 + base.P))
        k_chi, k_xi = base.kappa_chi * m[0], base.kappa_xi * m[1]
        if k_chi <= k_xi:
            k_chi, k_xi = k_xi, k_chi
        if k_chi == k_xi:
            k_chi = k_xi * 1.5
        starts.append(base.replace(
            kappa_chi=k_chi, kappa_xi=k_xi,
            sigma_chi=base.sigma_chi * m[2], sigma_xi=base.sigma_xi * m[3],
            meas_std=base.meas_std * m[5:],
        ))
    return starts


def simplex_steps(layout: ParamLayout, scores: FactorScores | None = None) -> np.ndarray:
    """Initial simplex edge lengths in unconstrained coordinates.

    ``Gamma`` steps are scaled so that one step moves the log price by about
    0.05 on a typical date.
    """
    steps = np.concatenate([
        [0.5, 0.5, 0.1, 0.5, 0.5, 0.3, 0.1, 0.1],
        np.full(layout.n_noise, 0.5),
    ])
    if layout.Q > 0:
        u_scale = np.std(scores.U, axis=0) if scores is not None else np.ones(layout.Q)
        u_scale = np.where(u_scale > 0, u_scale, 1.0)
        steps = np.concatenate([steps, np.tile(0.05 / u_scale, layout.P)])
    return steps


def _nelder_mead(objective, z0: np.ndarray, steps: np.ndarray, max_iter: int, tol: float):
    # restart from the best vertex until a fresh simplex stops improving;
    # a collapsed simplex in ~20 dimensions is a common false stop
    z, iters, f_prev = z0, 0, np.inf
    res = None
    while iters < max_iter:
        simplex = np.vstack([z, z + np.diag(steps)])
        res = minimize(
            objective, z, method="Nelder-Mead",
            options={"maxiter": max_iter - iters, "fatol": tol, "xatol": np.inf,
                     "adaptive": True, "initial_simplex": simplex},
        )
        iters += int(res.nit)
        z = res.x
        if not f_prev - res.fun > tol:
            break
        f_prev = res.fun
    fsim = res.final_simplex[1]
    spread = float(np.max(fsim) - np.min(fsim))
    return res.x, float(res.fun), iters, spread < tol


def fit_mle(dataset: AlignedDataset, scores: FactorScores | None, config: FitConfig, rng: np.random.Generator | None = None) -> FitResult:
    """Multi-start Nelder-Mead maximisation of the log-likelihood.

    The best start wins (ties broken lexicographically on the unconstrained
    vector), so the result does not depend on the order in which starts are
    evaluated.
    """
    P = dataset.futures.n_tenors
    layout = ParamLayout(P, config.Q, config.groups)
    if config.Q > 0 and (scores is None or scores.Q != config.Q):
        raise ValueError(f"factor scores with Q={config.Q} are required")
    base = config.start or heuristic_start(P, config.Q)
    if base.Q != config.Q or base.P != P:
        raise ValueError("start parameters do not match the data dimensions")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    starts = start_points(base, config.n_starts, rng, config.dispersion)
    z_starts = [transform_params(s, layout) for s in starts]
    steps = simplex_steps(layout, scores)

    def objective(z: np.ndarray) -> float:
        try:
            params = inverse_transform(z, layout)
        except ParamError:
            return INFEASIBLE_PENALTY
        ll = log_likelihood(dataset, params, scores, config.filter)
        return -ll if np.isfinite(ll) else INFEASIBLE_PENALTY

    def run(z0: np.ndarray):
        if objective(z0) >= INFEASIBLE_PENALTY:
            return z0, -np.inf, 0, False
        z, f, iters, conv = _nelder_mead(objective, z0, steps, config.max_iter, config.tol)
        ll = -f if f < INFEASIBLE_PENALTY else -np.inf
        logger.info("start finished: loglik=%.6f iterations=%d", ll, iters)
        return z, ll, iters, conv

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as ex:
            results = list(ex.map(run, z_starts))
    else:
        results = [run(z0) for z0 in z_starts]

    feasible = [(ll, tuple(z), i) for i, (z, ll, _, _) in enumerate(results) if np.isfinite(ll)]
    if not feasible:
        raise FilterError("all starts infeasible")
    best_ll, best_z, best_i = max(feasible, key=lambda r: (r[0], r[1]))
    params = inverse_transform(np.array(best_z), layout)
    # report the likelihood of the reference filter
    loglik = run_filter(dataset, params, scores, config.filter).loglik
    trace = [StartTrace(z0, ll, it, conv) for z0, (_, ll, it, conv) in zip(z_starts, results)]
    return FitResult(params, loglik, config.n_starts, bool(results[best_i][3]), trace)

"""In-sample diagnostics: fitted prices, RMSE tables, functional components.

Everything here is a pure function of filter output and fitted quantities
and returns plain arrays or small dataclasses ready to be written as CSV.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import Tenor, YieldPanel
from .kalman import FilterOutput
from .kpca import FactorScores, KpcaModel
from .model import StateSpaceMatrices

_LOG_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True)
class RmseTable:
    per_tenor: np.ndarray
    mean: float


@dataclass(frozen=True)
class CoefficientCurve:
    tenor_grid: tuple[Tenor, ...]
    gamma_values: np.ndarray


class Regime(str, enum.Enum):
    CONTANGO = "contango"
    BACKWARDATION = "backwardation"


def _functional_offset(Gamma, scores: FactorScores | None, n: int, p: int) -> np.ndarray:
    Gamma = np.asarray(Gamma, dtype=float).reshape(p, -1)
    if Gamma.shape[1] == 0 or scores is None:
        return np.zeros((n, p))
    return functional_component(Gamma, scores)


def fitted_log_prices(
    output: FilterOutput,
    matrices: StateSpaceMatrices,
    Gamma,
    scores: FactorScores | None = None,
    filtered: bool = False,
) -> np.ndarray:
    """Model log prices ``D + F a + Gamma u_t``.

    Uses the one-step-ahead state ``a_{t|t-1}`` by default (so that
    ``y - fitted`` equals the filter innovations); ``filtered=True`` uses
    ``a_t`` instead.
    """
    states = output.a_filt if filtered else output.a_pred
    n, p = states.shape[0], matrices.D.size
    return matrices.D + states @ matrices.F.T + _functional_offset(Gamma, scores, n, p)


def rmse_table(y, y_hat) -> RmseTable:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    per = np.sqrt(np.mean((y - y_hat) ** 2, axis=0))
    return RmseTable(per, float(np.mean(per)))


def functional_component(Gamma, scores: FactorScores) -> np.ndarray:
    """``(t, i) -> sum_j Gamma[i, j] U[t, j]``, the yield-curve term of each contract."""
    Gamma = np.asarray(Gamma, dtype=float)
    if Gamma.ndim != 2 or Gamma.shape[1] != scores.Q:
        raise ValueError(f"Gamma shape {Gamma.shape} does not match Q={scores.Q}")
    return scores.U @ Gamma.T


def price_decomposition(
    output: FilterOutput,
    matrices: StateSpaceMatrices,
    Gamma,
    scores: FactorScores,
    filtered: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Split fitted USD prices into the two-factor price and the yield-curve multiplier."""
    states = output.a_filt if filtered else output.a_pred
    ss_log = matrices.D + states @ matrices.F.T
    fc = functional_component(Gamma, scores)
    if np.any(ss_log > _LOG_MAX) or np.any(fc > _LOG_MAX):
        raise OverflowError("price overflow")
    return np.exp(ss_log), np.exp(fc)


def coefficient_curves(Gamma, kpca_model: KpcaModel) -> CoefficientCurve:
    Gamma = np.asarray(Gamma, dtype=float)
    if Gamma.ndim != 2 or Gamma.shape[1] != kpca_model.Q:
        raise ValueError(f"Gamma has {Gamma.shape[-1]} columns but the factor model has Q={kpca_model.Q}")
    return CoefficientCurve(kpca_model.tenors, Gamma @ kpca_model.basis.T)


def project_coefficients(curves: CoefficientCurve, kpca_model: KpcaModel) -> np.ndarray:
    """Quadrature inner products of each curve with the basis; recovers ``Gamma``."""
    return curves.gamma_values @ (kpca_model.quadrature[:, None] * kpca_model.basis)


def contango_indicator(yields: YieldPanel, short: Tenor, long: Tenor) -> list[Regime]:
    """Per-date regime of the yield curve; equal yields count as contango."""
    try:
        i, j = yields.tenors.index(short), yields.tenors.index(long)
    except ValueError:
        raise ValueError(f"tenor {short.label} or {long.label} not in the yield panel") from None
    zs, zl = yields.yields[i], yields.yields[j]
    return [Regime.BACKWARDATION if s > l else Regime.CONTANGO for s, l in zip(zs, zl)]

"""Yield-curve shock scenarios and their effect on fitted futures prices.

Model parameters stay frozen at their fitted values; only the functional
input changes.  By default the kernel PCA is refit on the shocked panel,
which changes the basis for the whole sample.  ``freeze_kpca=True`` instead
scores the shocked yields with the base model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .analysis import fitted_log_prices
from .data import AlignedDataset, Tenor, YieldPanel, format_month, parse_month
from .kalman import FilterConfig, FitResult, run_filter
from .kpca import KernelSpec, KpcaModel, factor_scores, fit_kpca
from .model import build_matrices

CI_Z = 1.96
CI_METHOD = "cross-sectional normal approximation: mean +/- 1.96 * sd / sqrt(n) over contracts in the bucket (sd with ddof=1; zero for a single contract)"
DEFAULT_BUCKETS: tuple[tuple[int, int], ...] = ((0, 4), (4, 8), (8, 12))


class StressError(ValueError):
    pass


@dataclass(frozen=True)
class ShockScenario:
    kind: Literal["temporary", "permanent"]
    start: np.datetime64
    end: np.datetime64 | None = None
    multiplier: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("temporary", "permanent"):
            raise StressError(f"unknown shock kind {self.kind!r}")
        start = parse_month(self.start) if isinstance(self.start, str) else np.datetime64(self.start, "M")
        object.__setattr__(self, "start", start)
        if self.kind == "temporary":
            if self.end is None:
                raise StressError("temporary shock needs an end date")
            end = parse_month(self.end) if isinstance(self.end, str) else np.datetime64(self.end, "M")
            if end < start:
                raise StressError("shock end precedes its start")
            object.__setattr__(self, "end", end)
        elif self.end is not None:
            raise StressError("permanent shock takes no end date")
        if not self.multiplier > 0:
            raise StressError("multiplier must be positive")

    def mask(self, dates: np.ndarray) -> np.ndarray:
        dates = np.asarray(dates, dtype="datetime64[M]")
        if self.kind == "permanent":
            return dates >= self.start
        return (dates >= self.start) & (dates <= self.end)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "start": format_month(self.start),
            "end": None if self.end is None else format_month(self.end),
            "multiplier": float(self.multiplier),
        }


def apply_shock(yields: YieldPanel, scenario: ShockScenario) -> YieldPanel:
    if yields.n_dates == 0 or scenario.start > yields.dates[-1]:
        raise StressError("shock starts after the end of the panel")
    z = yields.yields.copy()
    z[:, scenario.mask(yields.dates)] *= scenario.multiplier
    return YieldPanel(yields.dates, yields.tenors, z)


@dataclass(frozen=True)
class StressConfig:
    """``kpca_spec.bandwidth=None`` re-derives the bandwidth from each panel."""

    kpca_spec: KernelSpec = KernelSpec()
    eigen_tolerance: float = 1e-10
    center: bool = False
    freeze_kpca: bool = False
    freeze_bandwidth: bool = False
    filter: FilterConfig = FilterConfig()


def _prices(dataset: AlignedDataset, fitted: FitResult, model: KpcaModel, yields: YieldPanel, fcfg: FilterConfig) -> np.ndarray:
    scores = factor_scores(model, yields)
    out = run_filter(dataset, fitted.params, scores, fcfg)
    m = build_matrices(fitted.params, dataset.futures.tenors, dataset.dt)
    return np.exp(fitted_log_prices(out, m, fitted.params.Gamma, scores))


def stress_run(
    dataset: AlignedDataset,
    fitted: FitResult,
    scenario: ShockScenario,
    config: StressConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """USD fitted prices under the base and the shocked yield panels."""
    config = config or StressConfig()
    Q = fitted.params.Q
    if Q < 1:
        raise StressError("stress testing needs a functional-regression fit (Q > 0)")
    base_yields = dataset.yields
    shocked_yields = apply_shock(base_yields, scenario)

    base_model = fit_kpca(base_yields, config.kpca_spec, Q, config.eigen_tolerance, config.center)
    if config.freeze_kpca:
        shocked_model = base_model
    else:
        spec = base_model.spec if config.freeze_bandwidth else config.kpca_spec
        shocked_model = fit_kpca(shocked_yields, spec, Q, config.eigen_tolerance, config.center)

    base = _prices(dataset, fitted, base_model, base_yields, config.filter)
    shocked_ds = AlignedDataset(dataset.futures, shocked_yields, dataset.dt)
    shocked = _prices(shocked_ds, fitted, shocked_model, shocked_yields, config.filter)
    return base, shocked


@dataclass(frozen=True)
class StressReport:
    dates: np.ndarray
    buckets: tuple[str, ...]
    mean_diff: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    ci_method: str = CI_METHOD

    def rows(self) -> list[tuple[str, str, float, float, float]]:
        out = []
        for t, d in enumerate(self.dates):
            for b, label in enumerate(self.buckets):
                out.append((format_month(d), label, self.mean_diff[b, t], self.ci_low[b, t], self.ci_high[b, t]))
        return out


def bucket_report(
    base,
    shocked,
    tenors: Sequence[Tenor],
    buckets: Sequence[tuple[int, int]] = DEFAULT_BUCKETS,
    dates=None,
) -> StressReport:
    """Per-date mean USD price change within each ``(lo, hi]`` month bucket."""
    base = np.asarray(base, dtype=float)
    shocked = np.asarray(shocked, dtype=float)
    if base.shape != shocked.shape or base.shape[1] != len(tenors):
        raise StressError("price panels and tenors disagree in shape")
    months = np.array([t.months for t in tenors])
    diff = shocked - base
    n = base.shape[0]
    labels, means, lows, highs = [], [], [], []
    covered = np.zeros(months.size, dtype=int)
    for lo, hi in buckets:
        sel = (months > lo) & (months <= hi)
        covered += sel
        k = int(sel.sum())
        if k == 0:
            raise StressError(f"empty bucket ({lo}, {hi}]")
        d = diff[:, sel]
        mean = d.mean(axis=1)
        sd = d.std(axis=1, ddof=1) if k > 1 else np.zeros(n)
        half = CI_Z * sd / np.sqrt(k)
        labels.append(f"({lo},{hi}]")
        means.append(mean)
        lows.append(mean - half)
        highs.append(mean + half)
    if np.any(covered != 1):
        raise StressError("buckets must partition the tenor set")
    if dates is None:
        dates = np.arange(n).astype("datetime64[M]")
    return StressReport(np.asarray(dates, dtype="datetime64[M]"), tuple(labels), np.array(means), np.array(lows), np.array(highs))

import dataclasses

import numpy as np
import pytest

from conftest import FUTURES_TENORS, YIELD_TENORS
from ssfr.data import AlignedDataset, FuturesPanel, Tenor, YieldPanel, align_panels, month_range
from ssfr.kalman import FitResult
from ssfr.kpca import KernelSpec, factor_scores, fit_kpca
from ssfr.stress import (
    ShockScenario,
    StressConfig,
    StressError,
    apply_shock,
    bucket_report,
    stress_run,
)


@pytest.fixture(scope="module")
def fitted(fr_setup):
    ds, _, _, params = fr_setup
    return ds, FitResult(params, 0.0, 1, True, [])


def test_scenario_validation():
    with pytest.raises(StressError):
        ShockScenario("temporary", "2015-01")
    with pytest.raises(StressError):
        ShockScenario("temporary", "2015-03", "2015-01")
    with pytest.raises(StressError):
        ShockScenario("permanent", "2015-01", "2016-01")
    with pytest.raises(StressError):
        ShockScenario("permanent", "2015-01", multiplier=0.0)
    with pytest.raises(StressError):
        ShockScenario("twist", "2015-01")
    assert ShockScenario("temporary", "2015-01", "2016-01").to_dict()["end"] == "2016-01"


def _yields(n=24, start="2014-01"):
    z = np.random.default_rng(0).uniform(0.0, 0.05, (5, n))
    return YieldPanel(month_range(start, n), YIELD_TENORS, z)


def test_apply_shock_examples():
    y = _yields()
    np.testing.assert_array_equal(apply_shock(y, ShockScenario("permanent", "2014-06", multiplier=1.0)).yields, y.yields)
    perm = apply_shock(y, ShockScenario("permanent", "2014-06")).yields
    np.testing.assert_array_equal(perm[:, :5], y.yields[:, :5])
    np.testing.assert_array_equal(perm[:, 5:], 2 * y.yields[:, 5:])
    temp = apply_shock(y, ShockScenario("temporary", "2014-06", "2014-09")).yields
    np.testing.assert_array_equal(temp[:, 9:], y.yields[:, 9:])
    np.testing.assert_array_equal(temp[:, 5:9], 2 * y.yields[:, 5:9])
    with pytest.raises(StressError, match="after the end"):
        apply_shock(y, ShockScenario("permanent", "2016-01"))


def test_apply_shock_commutes_with_alignment():
    y = _yields(30, "2013-07")
    keep = np.ones(30, bool)
    keep[[3, 11]] = False
    dates = y.dates[keep][4:]
    f = FuturesPanel(dates, (Tenor(1),), np.zeros((dates.size, 1)))
    s = ShockScenario("temporary", "2014-01", "2014-06")
    a = align_panels(f, apply_shock(y, s)).yields
    b = apply_shock(align_panels(f, y).yields, s)
    np.testing.assert_array_equal(a.yields, b.yields)
    np.testing.assert_array_equal(a.dates, b.dates)


def test_bucket_report_examples():
    rng = np.random.default_rng(1)
    base = rng.uniform(40, 90, (6, 12))
    r = bucket_report(base, base, FUTURES_TENORS)
    assert r.buckets == ("(0,4]", "(4,8]", "(8,12]")
    assert np.all(r.mean_diff == 0) and np.all(r.ci_low == 0) and np.all(r.ci_high == 0)
    r = bucket_report(base, base + 1.0, FUTURES_TENORS)
    np.testing.assert_allclose(r.mean_diff, 1.0, atol=1e-12)
    np.testing.assert_allclose(r.ci_high - r.ci_low, 0.0, atol=1e-12)
    shocked = base + rng.normal(0, 2, base.shape)
    r = bucket_report(shocked, base, FUTURES_TENORS)
    assert np.all(r.ci_low <= r.mean_diff) and np.all(r.mean_diff <= r.ci_high)
    d = (base - shocked)[0, :4]
    half = 1.96 * d.std(ddof=1) / 2.0
    assert r.ci_high[0, 0] == pytest.approx(d.mean() + half, abs=1e-12)


def test_bucket_report_errors():
    base = np.ones((3, 12))
    with pytest.raises(StressError, match="empty bucket"):
        bucket_report(base, base, FUTURES_TENORS, buckets=((0, 4), (4, 12), (12, 20)))
    with pytest.raises(StressError, match="partition"):
        bucket_report(base, base, FUTURES_TENORS, buckets=((0, 6), (4, 12)))


def test_identity_shock_gives_zero_report(fitted):
    ds, fit = fitted
    base, shocked = stress_run(ds, fit, ShockScenario("permanent", "2012-01", multiplier=1.0))
    np.testing.assert_array_equal(base, shocked)
    r = bucket_report(base, shocked, ds.futures.tenors, dates=ds.dates)
    assert not np.any(r.mean_diff) and not np.any(r.ci_low) and not np.any(r.ci_high)


def test_zero_yields_are_shock_invariant(fr_setup):
    ds, _, _, params = fr_setup
    zero = YieldPanel(ds.dates, ds.yields.tenors, np.zeros_like(ds.yields.yields))
    zds = AlignedDataset(ds.futures, zero)
    fit = FitResult(params.replace(Gamma=params.Gamma[:, :1]), 0.0, 1, True, [])
    cfg = StressConfig(kpca_spec=KernelSpec("rbf", 1.0))
    base, shocked = stress_run(zds, fit, ShockScenario("permanent", "2011-01", multiplier=3.0), cfg)
    np.testing.assert_array_equal(base, shocked)


def test_frozen_kpca_is_causal(fitted):
    ds, fit = fitted
    s = ShockScenario("temporary", "2013-01", "2013-12")
    base, shocked = stress_run(ds, fit, s, StressConfig(freeze_kpca=True))
    r = bucket_report(base, shocked, ds.futures.tenors, dates=ds.dates)
    pre = ds.dates < s.start
    assert np.all(r.mean_diff[:, pre] == 0.0)
    assert np.any(r.mean_diff[:, ~pre] != 0.0)


def test_refit_kpca_moves_pre_shock_prices(fitted):
    # refitting the basis on the shocked panel changes scores on every date
    ds, fit = fitted
    s = ShockScenario("temporary", "2013-01", "2013-12")
    base, shocked = stress_run(ds, fit, s)
    pre = ds.dates < s.start
    assert np.any(shocked[pre] != base[pre])


def test_frozen_scores_double_in_window_only(fr_setup):
    ds, model, scores, _ = fr_setup
    s = ShockScenario("temporary", "2012-03", "2012-10")
    shocked = factor_scores(model, apply_shock(ds.yields, s)).U
    w = s.mask(ds.dates)
    np.testing.assert_array_equal(shocked[w], 2 * scores.U[w])
    np.testing.assert_array_equal(shocked[~w], scores.U[~w])
    refit = fit_kpca(apply_shock(ds.yields, s), KernelSpec(), 2)
    assert not np.allclose(factor_scores(refit, apply_shock(ds.yields, s)).U[w], 2 * scores.U[w])


def test_freeze_bandwidth_keeps_base_bandwidth(fitted):
    ds, fit = fitted
    s = ShockScenario("permanent", "2012-01")
    a = stress_run(ds, fit, s, StressConfig(freeze_bandwidth=True))
    b = stress_run(ds, fit, s)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[1], b[1])


def test_stress_needs_fr_fit(fitted):
    ds, fit = fitted
    ss = dataclasses.replace(fit, params=fit.params.replace(Gamma=np.zeros((12, 0))))
    with pytest.raises(StressError, match="Q > 0"):
        stress_run(ds, ss, ShockScenario("permanent", "2012-01"))

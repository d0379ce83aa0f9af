import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hwident.exceptions import DataError
from hwident.hwmodel import HWModelMiso, LinearBlock
from hwident.nonlinearity import Identity
from hwident.timeseries import TimeSeries
from hwident.validation import (
    ResidualConfig,
    allowed_violations,
    analyze,
    correlation_bound,
    correlation_test,
    prewhiten,
    residuals,
)


def gain(g=1.0, offset=0.0):
    return HWModelMiso(("u",), "y", (Identity(),), LinearBlock([[g]], [1.0]), Identity(), output_offset=offset)


def data(u, y):
    return TimeSeries.from_channels(1e-3, {"u": u, "y": y})


class TestResiduals:
    def test_perfect_model(self):
        u = np.sin(np.arange(300) / 7)
        e = residuals(gain(), data(u, u))
        assert e.size == 250 and np.all(e == 0)

    def test_constant_offset(self):
        u = np.sin(np.arange(300) / 7)
        np.testing.assert_allclose(residuals(gain(offset=0.3), data(u, u)), -0.3, atol=1e-12)

    def test_unbiased_fit_has_zero_mean(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=5000)
        noise = 0.1 * rng.normal(size=5000)
        e = residuals(gain(), data(u, u + noise))
        assert abs(e.mean()) <= 3 * 0.1 / np.sqrt(e.size)

    def test_diverging_model(self):
        from hwident.exceptions import DivergenceError

        m = HWModelMiso(("u",), "y", (Identity(),), LinearBlock([[1.0]], [1.0, -3.0]), Identity())
        with pytest.raises(DivergenceError):
            residuals(m, data(np.ones(2000), np.ones(2000)))


class TestCorrelation:
    def test_white_noise_passes(self):
        e = np.random.default_rng(1).standard_normal(10000)
        rep = correlation_test(e, max_lag=25)
        assert rep.bound == pytest.approx(0.02576)
        assert rep.autocorrelation_pass and rep.passed

    def test_alternating_fails(self):
        e = np.tile([1.0, -1.0], 200)
        rep = correlation_test(e, max_lag=25)
        # sum of N-1 products of -1 over N squares
        assert rep.autocorrelation[1] == pytest.approx(-399 / 400, abs=1e-12)
        assert not rep.autocorrelation_pass
        assert rep.failed_checks == ["autocorrelation"]

    def test_bound(self):
        assert correlation_bound(400) == pytest.approx(0.1288)
        assert correlation_bound(10000) == pytest.approx(0.02576)

    def test_lag_zero_is_one(self):
        rep = correlation_test(np.random.default_rng(2).normal(size=500), max_lag=10)
        assert rep.autocorrelation[0] == 1.0

    def test_too_short(self):
        with pytest.raises(DataError):
            correlation_test(np.ones(250), max_lag=25)

    def test_degenerate_passes_with_flag(self):
        rep = correlation_test(np.zeros(500), {"u": np.arange(500.0)}, max_lag=10)
        assert rep.degenerate and rep.passed and rep.notes

    def test_correlated_input_fails(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=2000)
        # residual = input through a slow first-order filter, correlated over many lags
        e = np.zeros(2000)
        for k in range(1, 2000):
            e[k] = 0.7 * e[k - 1] + u[k - 1]
        rep = correlation_test(e, {"u": u}, max_lag=10)
        assert rep.cross_correlation_pass == {"u": False}
        assert "cross_correlation:u" in rep.failed_checks

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 15))
    def test_autocorrelation_symmetric_and_bounded(self, seed, max_lag):
        rng = np.random.default_rng(seed)
        e = np.cumsum(rng.normal(size=400)) * 0.1 + rng.normal(size=400)
        rep = correlation_test(e, {"e": e}, max_lag=max_lag)
        assert np.all(np.abs(rep.autocorrelation) <= 1 + 1e-12)
        # the residual's cross-correlation with itself is the two-sided autocorrelation
        r = rep.cross_correlation["e"]
        np.testing.assert_allclose(r, r[::-1], atol=1e-12)
        np.testing.assert_allclose(r[max_lag:], rep.autocorrelation, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_cross_correlation_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        u = rng.normal(size=600)
        e = 0.3 * np.roll(u, 1) + rng.normal(size=600)
        a = correlation_test(e, {"u": u}, max_lag=10).cross_correlation["u"]
        b = correlation_test(e, {"u": c * u}, max_lag=10).cross_correlation["u"]
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_violation_rate_of_iid_sequences(self):
        rng = np.random.default_rng(4)
        rates = [correlation_test(rng.standard_normal(2000), max_lag=25).violation_fraction() for _ in range(200)]
        assert np.mean(rates) <= 0.02

    @pytest.mark.parametrize("n", [10, 25, 51, 200])
    def test_allowance_is_binomial_quantile(self, n):
        def cdf(k):
            return sum(math.comb(n, j) * 0.01**j * 0.99 ** (n - j) for j in range(k + 1))

        k = allowed_violations(n)
        assert cdf(k) >= 0.99 and (k == 0 or cdf(k - 1) < 0.99)

    def test_white_noise_pass_rate(self):
        rates, passes = [], 0
        for seed in range(50):
            rep = correlation_test(np.random.default_rng(seed).standard_normal(10000), max_lag=25)
            passes += rep.passed
            rates.append(rep.violation_fraction())
        assert passes >= 45 and np.mean(rates) <= 0.02

    def test_csv_export(self):
        rng = np.random.default_rng(5)
        rep = correlation_test(rng.normal(size=300), {"u": rng.normal(size=300)}, max_lag=5)
        lines = rep.to_csv_text().splitlines()
        assert lines[0] == "lag,r_ee,r_u_e,bound"
        assert len(lines) == 1 + 11


class TestPrewhiten:
    def test_white_input(self):
        e = np.random.default_rng(6).standard_normal(5000)
        out, phi = prewhiten(e, 3)
        assert np.all(np.abs(phi) <= 3 / np.sqrt(5000))
        assert np.max(np.abs(out - e[3:])) < 0.2

    def test_recovers_ar1(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal(5000)
        e = np.zeros(5000)
        for k in range(1, 5000):
            e[k] = 0.8 * e[k - 1] + w[k]
        out, phi = prewhiten(e, 1)
        assert phi[0] == pytest.approx(0.8, abs=0.05)
        assert not correlation_test(e, max_lag=25).autocorrelation_pass
        assert correlation_test(out, max_lag=25).autocorrelation_pass

    def test_constant_is_singular(self):
        with pytest.raises(DataError):
            prewhiten(np.zeros(100), 2)


def test_analyze_records_prewhitening():
    rng = np.random.default_rng(8)
    u = rng.normal(size=3000)
    m = gain()
    rep = analyze(m, data(u, u + 0.1 * rng.normal(size=3000)), ResidualConfig(prewhiten_order=2))
    assert rep.prewhitening.size == 2 and rep.passed
    assert analyze(m, data(u, u + 0.1 * rng.normal(size=3000))).prewhitening is None


def test_residual_config_checks():
    for bad in (dict(max_lag=0), dict(confidence=1.0), dict(prewhiten_order=-1), dict(decimation=0)):
        with pytest.raises(DataError):
            ResidualConfig(**bad)

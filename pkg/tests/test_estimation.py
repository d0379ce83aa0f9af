import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_inputs
from hwident.estimation import (
    METHODS,
    EstimationConfig,
    Structure,
    arx,
    estimate,
    gauss_newton_step,
    initialize,
    jacobian,
    levenberg_marquardt_step,
    loss,
)
from hwident.exceptions import ConfigError
from hwident.hwmodel import HWModelMiso, LinearBlock
from hwident.metrics import nrmse_fit
from hwident.nonlinearity import Identity, Polynomial, SigmoidNetwork
from hwident.timeseries import TimeSeries


def gain_model(g, n_b=1):
    num = np.zeros((1, n_b))
    num[0, 0] = g
    return HWModelMiso(("u",), "y", (Identity(),), LinearBlock(num, [1.0], 0, 1e-3), Identity())


def series(u, y):
    return TimeSeries.from_channels(1e-3, {"u": u, "y": y})


NO_DISCARD = EstimationConfig(discard=0)


class TestLoss:
    def test_zero_for_exact_model(self):
        u = np.linspace(0, 1, 100)
        assert loss(gain_model(2.0), series(u, 2 * u)) == 0.0

    def test_hand_computed(self):
        u = np.zeros(4)
        y = np.array([1.0, -1.0, 1.0, -1.0])
        assert loss(gain_model(1.0), series(u, y), NO_DISCARD) == pytest.approx(1.0)

    def test_linear_in_weight(self):
        rng = np.random.default_rng(0)
        u, y = rng.normal(size=(2, 200))
        data = series(u, y)
        v1 = loss(gain_model(0.5), data, EstimationConfig(weight=1.0))
        v2 = loss(gain_model(0.5), data, EstimationConfig(weight=2.0))
        assert v2 == 2 * v1

    def test_transient_discard(self):
        u = np.ones(100)
        y = np.ones(100)
        y[:50] = 10.0
        assert loss(gain_model(1.0), series(u, y)) == 0.0  # first max(n_f, 50) samples dropped
        assert loss(gain_model(1.0), series(u, y), NO_DISCARD) > 0

    def test_unstable_model_is_infinite(self):
        m = HWModelMiso(("u",), "y", (Identity(),), LinearBlock([[1.0]], [1.0, -1.5]), Identity())
        u = np.ones(200)
        assert loss(m, series(u, u)) == float("inf")

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 100.0), st.integers(0, 2**31))
    def test_homogeneity(self, c, seed):
        rng = np.random.default_rng(seed)
        u, y = rng.normal(size=(2, 120))
        m = gain_model(0.7)
        scaled = HWModelMiso(("u",), "y", (Identity(),), m.linear, Identity(), output_scale=c)
        v = loss(m, series(u, y))
        assert loss(scaled, series(u, c * y)) == pytest.approx(c * c * v, rel=1e-10)

    def test_weight_must_be_psd(self):
        with pytest.raises(ConfigError):
            EstimationConfig(weight=-1.0)
        with pytest.raises(ConfigError):
            EstimationConfig(weight=[[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ConfigError):
            EstimationConfig(method="newton")


class TestJacobian:
    def test_static_gain(self):
        u = np.random.default_rng(1).normal(size=60)
        J = jacobian(gain_model(3.0), series(u, u))
        np.testing.assert_allclose(J[:, 0], -u)

    def test_dead_translation_column(self):
        h = SigmoidNetwork([0.0, 1.0], [1.0, 1.0], [0.0, 0.5], 0.0, 1.0)
        m = HWModelMiso(("u",), "y", (Identity(),), LinearBlock([[1.0]], [1.0]), h)
        u = np.linspace(-1, 1, 50)
        J = jacobian(m, series(u, u))
        # h params follow the single linear coefficient: amplitudes, dilations, translations
        translation_of_dead_unit = 1 + 2 + 2 + 0
        assert np.all(J[:, translation_of_dead_unit] == 0)

    def test_polynomial_model_against_differences(self, rng):
        from conftest import random_model

        m = random_model("polynomial", rng)
        data = random_inputs(rng, n=160).with_channels(y=np.zeros(160))
        J = jacobian(m, data)
        theta = m.theta
        for j in range(m.n_p):
            h = 1e-6 * max(1.0, abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd = -(m.with_theta(tp).simulate(data) - m.with_theta(tm).simulate(data)) / (2 * h)
            assert np.linalg.norm(J[:, j] - fd) <= 1e-4 * np.linalg.norm(fd)


class TestSteps:
    def test_lm_tends_to_gauss_newton(self):
        rng = np.random.default_rng(3)
        J = rng.normal(size=(100, 4))
        e = rng.normal(size=100)
        gn, r = gauss_newton_step(J, e)
        assert r == 4
        np.testing.assert_allclose(levenberg_marquardt_step(J, e, lam=1e-14), gn, atol=1e-10)

    def test_subspace_truncation(self):
        rng = np.random.default_rng(4)
        J = rng.normal(size=(50, 3))
        J = np.column_stack([J, J[:, 0] + J[:, 1]])  # rank 3
        step, r = gauss_newton_step(J, rng.normal(size=50), rtol=1e-6)
        assert r == 3 and np.all(np.isfinite(step))
        assert gauss_newton_step(J, rng.normal(size=50), rank=1)[1] == 1


class TestEstimate:
    def test_one_gauss_newton_step_is_exact(self):
        u = np.random.default_rng(5).normal(size=300)
        cfg = EstimationConfig(method="subspace_gauss_newton", max_iter=1)
        res = estimate(gain_model(0.0), series(u, 2 * u), cfg)
        assert res.model.linear.numerators[0, 0] == pytest.approx(2.0, abs=1e-12)

    @pytest.mark.parametrize("method", METHODS)
    def test_methods_agree_on_linear_problem(self, method):
        rng = np.random.default_rng(6)
        u = rng.normal(size=400)
        y = np.convolve(u, [0.8, -0.3, 0.1])[:400] + 0.05 * rng.normal(size=400)
        ref = estimate(gain_model(0.0, 3), series(u, y), EstimationConfig(method="subspace_gauss_newton"))
        res = estimate(gain_model(0.0, 3), series(u, y), EstimationConfig(method=method, max_iter=5000))
        np.testing.assert_allclose(res.model.theta, ref.model.theta, atol=1e-6)

    @pytest.mark.parametrize("method", METHODS)
    def test_loss_trace_non_increasing(self, method, rng):
        from conftest import random_model

        truth = random_model("sigmoid_network", rng)
        data = random_inputs(rng, n=600)
        data = data.with_channels(y=truth.simulate(data) + 0.01 * rng.normal(size=600))
        init = initialize(Structure("sigmoid_network", 3, 2, 2, 1), data, "y", ("a", "b"))
        res = estimate(init, data, EstimationConfig(method=method, max_iter=15))
        assert np.all(np.diff(res.loss_trace) <= 0)
        assert res.termination in ("gradient", "loss_stalled", "max_iter", "numerical_failure")

    def test_polynomial_hammerstein_self_consistency(self):
        rng = np.random.default_rng(7)
        n = 3000
        u = np.repeat(rng.uniform(-1, 1, n // 30), 30)
        truth = HWModelMiso(
            ("u",), "y", (Polynomial([0.0, 1.0, 0.5, -0.3]),),
            LinearBlock([[0.3, 0.2]], np.poly([0.6, 0.3]), 1, 1e-3), Polynomial([0.0, 1.0, 0.2, 0.1]),
        )
        data = series(u, truth.simulate(u))
        init = initialize(Structure("polynomial", 3, 2, 2, 1), data, "y", ("u",))
        res = estimate(init, data, EstimationConfig(method="levenberg_marquardt", max_iter=300))
        assert nrmse_fit(data["y"][50:], res.model.simulate(data)[50:]) >= 99.9

    def test_numerical_failure_is_reported(self):
        u = np.ones(100)
        m = HWModelMiso(("u",), "y", (Identity(),), LinearBlock([[1.0]], [1.0, -2.0]), Identity())
        res = estimate(m, series(u, u))
        assert res.failed and res.termination == "numerical_failure"


class TestInitialize:
    def test_identity_structure_on_identity_data(self):
        u = np.repeat(np.random.default_rng(8).uniform(0.9, 1.1, 100), 20)
        data = series(u, u)
        m = initialize(Structure("polynomial", 2, 1, 1, 0), data, "y", ("u",))
        assert nrmse_fit(u[50:], m.simulate(data)[50:]) >= 99.0

    @pytest.mark.parametrize("family", ["polynomial", "piecewise_linear", "sigmoid_network", "wavelet_network"])
    def test_nonlinearities_start_as_identity(self, family, rng):
        data = random_inputs(rng).with_channels(y=rng.normal(size=400))
        m = initialize(Structure(family, 4, 2, 2, 0), data, "y", ("a", "b"))
        Z = m.normalized_inputs(data.matrix(("a", "b")))
        for i, nl in enumerate(m.input_nonlinearities):
            np.testing.assert_allclose(nl(Z[:, i]), Z[:, i], atol=1e-9)
        x = m.forward(data)[2]
        np.testing.assert_allclose(m.output_nonlinearity(x), x, atol=1e-9)

    def test_reproduces_arx_residual(self):
        rng = np.random.default_rng(9)
        u = rng.normal(size=500)
        y = np.convolve(u, [0.5, 0.25])[:500]
        data = series(u, y)
        m = initialize(Structure("polynomial", 2, 2, 0, 0), data, "y", ("u",))
        z = (u - u[0]) / np.std(u)
        yn = (y - y[0]) / np.std(y)
        _, _, rss, _ = arx(z[:, None], yn, 2, 0, 0)
        e = (y - m.simulate(data)) / np.std(y)
        assert float(e[1:] @ e[1:]) <= rss + 1e-9

    def test_rank_deficient_falls_back_to_unit_gain(self):
        data = series(np.zeros(200), np.linspace(0, 1, 200))
        m = initialize(Structure("polynomial", 2, 2, 1, 0), data, "y", ("u",))
        assert m.linear.numerators[0, 0] == 1.0
        np.testing.assert_array_equal(m.linear.denominator, [1.0, 0.0])

    def test_missing_channel(self):
        from hwident.exceptions import DataError

        with pytest.raises(DataError):
            initialize(Structure(), series(np.ones(10), np.ones(10)), "y", ("v",))

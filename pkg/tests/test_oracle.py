import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.special import expit

from pixdiff import oracle
from pixdiff.errors import ConfigurationError, QuadratureError
from pixdiff.oracle import GridData, LossCurve, PrecisionMixture
from pixdiff.schedules import NoiseLevel

# mpmath adaptive quadrature at 30 digits (independent of the Gauss-Hermite path).
EPS_MSE_1BIT_LAM0 = 0.449599509206672829711680501178
EPS_MSE_3BIT_LAM3 = 0.810370060799119639751933007913
# Posterior mean for n=2, lambda=0, z=0.5 by 4-term enumeration in mpmath.
DENOISE_2BIT = 0.311200300643228039357945974554


class TestGridData:
    def test_support(self):
        assert_allclose(GridData(2).support, [-1, -1 / 3, 1 / 3, 1])
        s = GridData(8).support
        assert s[0] == -1 and s[-1] == 1
        assert_allclose(np.diff(s), 2 / 255)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            GridData(0)

    def test_mixture_normalized(self):
        assert_allclose(oracle.LOW_BIT_MIXTURE.weights(), np.array([1, 4, 4, 6]) / 15)
        with pytest.raises(ConfigurationError):
            PrecisionMixture.of([8, 7], [1, 0])


class TestDenoiser:
    @given(st.floats(-5, 5), st.floats(-8, 8))
    def test_one_bit_tanh(self, z, lam):
        level = NoiseLevel.from_logsnr(lam)
        expected = math.tanh(level.alpha * z / level.sigma ** 2)
        assert oracle.optimal_denoiser(GridData(1), z, level) == pytest.approx(expected, abs=1e-12)

    def test_symmetry(self):
        for n in (1, 2, 5):
            assert abs(oracle.optimal_denoiser(GridData(n), 0.0, 1.5)) < 1e-15

    def test_two_bit_enumeration(self):
        x_hat = oracle.optimal_denoiser(GridData(2), 0.5, NoiseLevel.from_logsnr(0.0))
        assert x_hat == pytest.approx(DENOISE_2BIT, abs=1e-14)
        # hand sum of the four posterior terms
        a = s = math.sqrt(0.5)
        xs = [-1, -1 / 3, 1 / 3, 1]
        w = [math.exp(-((0.5 - a * x) ** 2) / (2 * s * s)) for x in xs]
        assert x_hat == pytest.approx(sum(wi * x for wi, x in zip(w, xs)) / sum(w), abs=1e-15)

    @settings(max_examples=30)
    @given(st.floats(-50, 50), st.floats(-20, 20))
    def test_in_support_range(self, z, lam):
        x_hat = oracle.optimal_denoiser(GridData(3), z, lam)
        assert -1 <= x_hat <= 1

    def test_vectorized(self):
        z = np.linspace(-2, 2, 12).reshape(3, 4)
        out = oracle.optimal_denoiser(GridData(4), z, 1.0)
        assert out.shape == z.shape
        assert out[1, 2] == oracle.optimal_denoiser(GridData(4), z[1, 2], 1.0)


class TestEpsMse:
    def test_mpmath_values(self):
        assert oracle.eps_mse_curve(GridData(1), [0.0]).values[0] == pytest.approx(EPS_MSE_1BIT_LAM0, abs=1e-13)
        assert oracle.eps_mse_curve(GridData(3), [3.0]).values[0] == pytest.approx(EPS_MSE_3BIT_LAM3, abs=1e-13)

    def test_trapezoid_cross_check(self):
        gh = oracle.eps_mse_curve(GridData(1), [0.0]).values[0]
        trap = oracle.eps_mse_trapezoid(GridData(1), 0.0)
        assert gh > 0
        assert abs(gh - trap) < 1e-6

    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_tails(self, n):
        c = oracle.eps_mse_curve(GridData(n), [-30.0, 30.0])
        assert np.all(c.values < 1e-4)
        # at very low SNR the error is e^lam Var[x]
        assert c.values[0] == pytest.approx(math.exp(-30) * GridData(n).variance(), rel=1e-6)

    @pytest.mark.parametrize("n", [1, 3, 6])
    def test_doubling_stability(self, n):
        lam = np.linspace(-10, 20, 7)
        c = oracle.eps_mse_curve(GridData(n), lam)
        doubled = np.array([oracle.eps_mse_curve(GridData(n), [l], nodes=2 * int(m), adaptive=False).values[0]
                            for l, m in zip(lam, c.nodes)])
        assert np.max(np.abs(doubled - c.values)) < 1e-8

    def test_identity_with_x_mse(self):
        data = GridData(3)
        for lam in (-4.0, 0.0, 2.5, 6.0):
            eps = oracle.eps_mse_curve(data, [lam]).values[0]
            var, _ = oracle.posterior_variance(data, lam)
            assert abs(eps - math.exp(lam) * var) < 1e-8
            xm, _ = oracle.x_mse(data, lam)
            assert abs(eps - math.exp(lam) * xm) < 1e-8

    def test_non_convergence(self):
        # an unreachable tolerance with a tiny node budget must fail loudly
        with pytest.raises(QuadratureError):
            oracle.eps_mse_curve(GridData(8), [9.0], nodes=4, max_nodes=8, tol=0.0)

    def test_non_finite_grid(self):
        with pytest.raises(ConfigurationError):
            oracle.eps_mse_curve(GridData(1), [0.0, np.inf])

    def test_optimality(self):
        # Perturbing x_hat along the tanh' direction raises the quadrature mse.
        data = GridData(1)
        level = NoiseLevel.from_logsnr(0.0)
        a, s = level.alpha, level.sigma
        eps, w = oracle._hermite(127)

        def mse(delta):
            total = 0.0
            for x in data.support:
                z = a * x + s * eps
                u = a * z / s ** 2
                x_hat = np.tanh(u) + delta * (1 - np.tanh(u) ** 2)
                total += np.sum(w * (x_hat - x) ** 2)
            return total / data.size

        base = mse(0.0)
        assert mse(1e-3) > base and mse(-1e-3) > base

    def test_finer_grid_is_harder(self):
        lam = np.array([5.0, 6.0, 7.0])  # high SNR, where grid points separate
        vals = [oracle.eps_mse_curve(GridData(n), lam).values for n in (1, 3, 6)]
        assert np.all(vals[0] < vals[1]) and np.all(vals[1] < vals[2])


class TestWeighted:
    def test_unit_weight(self):
        lam = np.array([-2.0, 1.0, 4.0])
        base = oracle.eps_mse_curve(GridData(2), lam)
        unit = oracle.weighted_curve(GridData(2), lam, weight=np.ones_like)
        assert_allclose(unit.values, base.values, rtol=0, atol=0)

    def test_half_at_bias(self):
        base = oracle.eps_mse_curve(GridData(3), [10.7])
        w = oracle.weighted_curve(GridData(3), [10.7])
        assert w.values[0] == pytest.approx(0.5 * base.values[0], rel=1e-15)

    @pytest.mark.slow
    def test_eight_bit_unimodal(self):
        lam = np.linspace(-10, 25, 36)
        vals = oracle.weighted_curve(GridData(8), lam).values
        steps = np.sign(np.diff(vals))
        steps = steps[steps != 0]
        assert np.count_nonzero(np.diff(steps) != 0) == 1
        k = int(np.argmax(vals))
        assert 0 < k < len(lam) - 1

    def test_loss_curve_finite(self):
        with pytest.raises(QuadratureError):
            LossCurve(np.array([0.0]), np.array([np.nan]))


class TestMixture:
    def test_single_component(self):
        lam = np.array([-1.0, 3.0])
        mix = oracle.mixture_curve(PrecisionMixture.of([3], [2.0]), lam)
        assert_allclose(mix.values, oracle.eps_mse_curve(GridData(3), lam).values, rtol=1e-15)

    def test_scaling_invariance(self):
        lam = np.array([0.0, 5.0])
        a = oracle.mixture_curve(PrecisionMixture.of([3, 2], [1, 3]), lam)
        b = oracle.mixture_curve(PrecisionMixture.of([3, 2], [10, 30]), lam)
        assert_allclose(a.values, b.values, rtol=1e-15)

    def test_weighted_sum(self):
        lam = np.array([4.0])
        mix = oracle.mixture_curve(PrecisionMixture.of([1, 2], [1, 3]), lam)
        parts = [oracle.eps_mse_curve(GridData(n), lam).values[0] for n in (1, 2)]
        assert mix.values[0] == pytest.approx(0.25 * parts[0] + 0.75 * parts[1], rel=1e-14)

    def test_distance(self):
        lam = np.linspace(-5, 5, 11)
        c = LossCurve(lam, expit(lam))
        assert oracle.curve_distance(c, c) == 0
        assert oracle.curve_distance(c, LossCurve(lam, 2 * expit(lam))) == 0
        with pytest.raises(ValueError):
            oracle.curve_distance(c, LossCurve(lam[:3], lam[:3]))


class TestOracleModel:
    def test_prediction(self):
        model = oracle.OracleModel(GridData(1))
        z = np.array([[0.3], [-1.2]])
        level = NoiseLevel.from_logsnr(np.array([0.0, 2.0]))
        pred = model(z, level)
        assert pred.space == "x"
        expected = np.tanh(level.alpha[:, None] * z / level.sigma[:, None] ** 2)
        assert_allclose(pred.value, expected, rtol=1e-12)

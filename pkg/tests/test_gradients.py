"""Gradient estimators: score-function, aggregated, marginalized, pathwise."""

import math

import numpy as np
import pytest

from signagg import kernels
from signagg.forward import layer_conditional, sample_sign_paths
from signagg.gradcheck import (
    check_final_estimators,
    check_global_reinforce,
    check_lambda_gradient,
    check_marginalized,
    check_pathwise,
    fd_grad,
)
from signagg.gradients import (
    aggregated_final_draws,
    aggregated_final_grad,
    global_reinforce_grads,
    marginalized_reinforce_grads,
    pathwise_grads,
    reinforce_final_draws,
    sign_loss_grads,
)
from signagg.network import GaussianPosterior, NetworkSpec, init_posterior
from signagg.rng import substream

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _means_posterior(widths, rng, use_bias=True, activation="sign", scale=0.7):
    spec = NetworkSpec(widths=tuple(widths), hidden_activation=activation, use_bias=use_bias)
    weights = [scale * rng.standard_normal(s) for s in spec.layer_shapes()]
    biases = [scale * rng.standard_normal(s[0]) for s in spec.layer_shapes()] if use_bias else None
    return GaussianPosterior(spec, weights, biases)


def _exact_final_grad_single_layer(post, x):
    """Closed-form d F / d (final means) for a network with no hidden layer."""
    x = np.asarray(x, dtype=np.float64)
    v = float(x @ x) + 1.0
    z = float(post.weights[0][0] @ x) + float(post.biases[0][0])
    u = z / math.sqrt(2.0 * v)
    cf = _SQRT_2_OVER_PI * math.exp(-u * u) / math.sqrt(v)
    return cf * np.concatenate([x, [1.0]])


class TestScoreFunctionFinal:
    def test_draw_layout(self):
        rng = np.random.default_rng(42)
        post = _means_posterior((3, 2, 1), rng)
        draws = reinforce_final_draws(post, rng.standard_normal(3), 11, substream(0, 2))
        assert draws.shape == (11, 3)  # 2 weights + 1 bias

    def test_mean_matches_closed_form_single_layer(self):
        rng = np.random.default_rng(1)
        post = _means_posterior((3, 1), rng)
        x = rng.standard_normal(3)
        T = 200_000
        draws = reinforce_final_draws(post, x, T, substream(1, 2))
        ref = _exact_final_grad_single_layer(post, x)
        se = draws.std(axis=0, ddof=1) / math.sqrt(T)
        assert np.all(np.abs(draws.mean(axis=0) - ref) < 4.0 * se + 1e-9)

    def test_draw_covariance_is_identity_minus_outer_gradient(self):
        """A single score draw has second moment E[g g^T] = I, hence
        covariance I - G G^T: the gap to the aggregated estimator in one
        matrix."""
        rng = np.random.default_rng(2)
        post = _means_posterior((3, 1), rng)
        x = rng.standard_normal(3)
        T = 400_000
        draws = reinforce_final_draws(post, x, T, substream(2, 2))
        ref = np.eye(4) - np.outer(
            _exact_final_grad_single_layer(post, x), _exact_final_grad_single_layer(post, x)
        )
        cov = np.cov(draws.T)
        np.testing.assert_allclose(cov, ref, atol=0.02)


class TestAggregatedFinal:
    def test_single_layer_draws_are_deterministic(self):
        rng = np.random.default_rng(3)
        post = _means_posterior((3, 1), rng)
        x = rng.standard_normal(3)
        grad = aggregated_final_grad(post, x, 9, substream(3, 2))
        ref = _exact_final_grad_single_layer(post, x)
        np.testing.assert_allclose(grad.mean, ref, rtol=1e-12)
        np.testing.assert_allclose(grad.per_draw, np.tile(ref, (9, 1)), rtol=1e-12)

    def test_draw_norm_bounded(self):
        """Each aggregated draw has norm sqrt(2/pi) e^{-u^2} <= sqrt(2/pi)."""
        rng = np.random.default_rng(4)
        post = _means_posterior((3, 4, 1), rng)
        draws = aggregated_final_draws(post, rng.standard_normal(3), 500, substream(4, 2))
        norms = np.linalg.norm(draws, axis=1)
        assert np.all(norms <= _SQRT_2_OVER_PI + 1e-12)

    def test_lower_trace_than_score_function(self):
        """Paired comparison on random nets: aggregating the final layer can
        only shrink the per-draw covariance trace."""
        for seed in range(8):
            rng = np.random.default_rng(seed)
            post = _means_posterior((3, 3, 1), rng)
            x = rng.standard_normal(3)
            T = 20_000
            tr_score = np.trace(np.cov(reinforce_final_draws(post, x, T, substream(5, 2, seed)).T))
            tr_agg = np.trace(np.cov(aggregated_final_draws(post, x, T, substream(6, 2, seed)).T))
            assert tr_agg <= tr_score + 0.1


class TestMarginalizedReinforce:
    def test_unit_score_has_zero_conditional_mean(self):
        """q(+1) score(+1) + q(-1) score(-1) = 0 for the sampling conditional;
        the estimator's hidden-layer terms are built from exactly this score."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            a_prev = rng.standard_normal(3)
            w = rng.standard_normal(3)
            b = float(rng.standard_normal())
            z = float(w @ a_prev) + b
            v = float(a_prev @ a_prev) + 1.0
            inv_scale = np.array([1.0 / math.sqrt(2.0 * v)])
            inv_std = np.array([1.0 / math.sqrt(v)])
            p = float(layer_conditional(w[None, :], a_prev, np.array([b]))[0])
            zz = np.array([[z]])
            g_plus = float(kernels.score_coeff(np.array([[1.0]]), zz, inv_scale, inv_std)[0, 0])
            g_minus = float(kernels.score_coeff(np.array([[-1.0]]), zz, inv_scale, inv_std)[0, 0])
            assert abs(p * g_plus + (1.0 - p) * g_minus) < 1e-12 * max(abs(g_plus), 1.0)

    def test_flat_gradient_covers_every_parameter(self):
        rng = np.random.default_rng(6)
        post = _means_posterior((3, 4, 2, 1), rng)
        grad = marginalized_reinforce_grads(post, rng.standard_normal(3), 5, substream(7, 2))
        assert grad.flat().shape == (post.spec.n_params(),)
        assert grad.sample_count == 5

    def test_matches_enumeration_finite_differences(self):
        result = check_marginalized(seed=0, total_samples=200_000, repeats=50)
        assert result.passed, result.detail

    def test_loss_gradient_is_scaled_output_gradient(self):
        """On identical paths, d loss / d means = (-y / 2) d F / d means for
        a single example: the two entry points share their path stream."""
        rng = np.random.default_rng(7)
        post = _means_posterior((3, 2, 1), rng)
        x = rng.standard_normal(3)
        for y in (1.0, -1.0):
            g_loss, _, _ = sign_loss_grads(post, x[None, :], np.array([y]), 40, substream(8, 2))
            g_out = marginalized_reinforce_grads(post, x, 40, substream(8, 2))
            np.testing.assert_allclose(g_loss.flat(), -0.5 * y * g_out.flat(), rtol=1e-10)

    def test_risk_consistent_with_values(self):
        rng = np.random.default_rng(8)
        post = _means_posterior((3, 2, 1), rng)
        X = rng.standard_normal((5, 3))
        y = np.where(rng.random(5) < 0.5, -1.0, 1.0)
        _, risk, values = sign_loss_grads(post, X, y, 16, substream(9, 2))
        np.testing.assert_allclose(
            risk, np.mean(0.5 * (1.0 - y * values.mean(axis=0))), rtol=1e-12
        )


class TestPathwise:
    @pytest.mark.parametrize("activation", ["sigmoid", "relu"])
    def test_matches_frozen_noise_finite_differences(self, activation):
        result = check_pathwise(activation, seed=0)
        assert result.passed, result.detail

    def test_corruption_is_detected(self):
        """Negating the estimate must fail the check — guards against a
        vacuously passing comparison."""
        result = check_pathwise("sigmoid", seed=0, corrupt=True)
        assert not result.passed

    def test_label_flip_negates_gradient(self):
        rng = np.random.default_rng(9)
        post = _means_posterior((3, 3, 1), rng, activation="sigmoid")
        x = rng.standard_normal(3)
        noises = [substream(10, 2).standard_normal((4, 1, 3))]
        g_pos = pathwise_grads(post, x, 1.0, 4, noises=noises).flat()
        g_neg = pathwise_grads(post, x, -1.0, 4, noises=noises).flat()
        np.testing.assert_allclose(g_neg, -g_pos, rtol=1e-12)

    def test_relu_dead_units_get_zero_gradient(self):
        """With all preactivations forced negative, every hidden gradient
        vanishes and only the final layer (through the zero activations plus
        bias) survives."""
        spec = NetworkSpec(widths=(2, 3, 1), hidden_activation="relu", use_bias=True)
        weights = [np.zeros((3, 2)), np.full((1, 3), 0.5)]
        biases = [np.full(3, -50.0), np.array([0.2])]
        post = GaussianPosterior(spec, weights, biases)
        noises = [np.zeros((2, 1, 3))]  # zero noise keeps preactivations at -50
        grad = pathwise_grads(post, np.array([0.3, -0.4]), 1.0, 2, noises=noises)
        np.testing.assert_array_equal(grad.weights[0], np.zeros((3, 2)))
        np.testing.assert_array_equal(grad.biases[0], np.zeros(3))
        assert grad.biases[1][0] != 0.0


class TestGlobalReinforce:
    def test_matches_enumeration_finite_differences(self):
        result = check_global_reinforce(seed=0, total_samples=200_000, repeats=20)
        assert result.passed, result.detail

    def test_constant_loss_gives_exactly_zero_gradient(self):
        """A saturated output bias makes every draw classify +1; with labels
        +1 every loss is zero and the score-weighted sum vanishes exactly."""
        spec = NetworkSpec(widths=(2, 2, 1), hidden_activation="sign", use_bias=True)
        weights = [np.zeros((2, 2)), np.zeros((1, 2))]
        biases = [np.zeros(2), np.array([1e6])]
        post = GaussianPosterior(spec, weights, biases)
        X = np.random.default_rng(10).standard_normal((4, 2))
        grad, risk = global_reinforce_grads(post, X, np.ones(4), 50, substream(11, 2))
        assert risk == 0.0
        assert np.all(grad.flat() == 0.0)

    def test_risk_bounds(self):
        rng = np.random.default_rng(11)
        post = _means_posterior((3, 2, 1), rng)
        X = rng.standard_normal((6, 3))
        y = np.where(rng.random(6) < 0.5, -1.0, 1.0)
        _, risk = global_reinforce_grads(post, X, y, 64, substream(12, 2))
        assert 0.0 <= risk <= 1.0


class TestFinalEstimatorChecks:
    def test_both_final_estimators_pass(self):
        results = check_final_estimators(seed=0, n_draws=200_000)
        for result in results:
            assert result.passed, result.detail


class TestLambdaGradientCheck:
    def test_random_configs_pass(self):
        result = check_lambda_gradient(seed=0, n_configs=25)
        assert result.passed, result.detail


class TestFiniteDifferenceHelper:
    def test_fd_grad_on_quadratic(self):
        """Central differences recover the exact gradient of a quadratic."""
        rng = np.random.default_rng(12)
        post = _means_posterior((2, 1), rng)

        def fn(p):
            flat = np.concatenate([a.ravel() for a in p.param_arrays()])
            return float(flat @ flat)

        base = np.concatenate([a.ravel() for a in post.param_arrays()])
        np.testing.assert_allclose(fd_grad(post, fn, 1e-5), 2.0 * base, rtol=1e-8)

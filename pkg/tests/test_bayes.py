"""Variational machinery: sampling, the tempered objective, and the
closed-form posterior variance against an arbitrary-precision oracle."""

import math

import mpmath
import numpy as np
import pytest

from fedbiad.bayes import (
    VariationalParams,
    data_term,
    kl_regularizer,
    mask_rows,
    posterior_variance,
    sample_weights,
    tempered_loss,
)
from fedbiad.nn import ModelParams, ModelSpec, finite_diff_grad
from fedbiad.patterns import DroppingPattern

from conftest import make_model


def small_vp(s2=0.0, seed=0, prior_var=1.0, out=2):
    spec, params = make_model("mlp", n_layers=2, in_dim=3, hidden=4, out=out, seed=seed)
    return VariationalParams(params, s2=s2, alpha=0.5, sigma2=1.0, prior_var=prior_var)


def pattern_for(vp, bits):
    return DroppingPattern(np.array(bits, dtype=np.uint8))


class TestSampleWeights:
    def test_zero_variance_gives_masked_means_exactly(self, rng):
        vp = small_vp(s2=0.0)
        pat = pattern_for(vp, [1, 0, 1, 0, 0, 1, 1, 0])
        drawn = sample_weights(vp, pat, rng)
        expected = mask_rows(vp.means, pat)
        for a, b in zip(drawn.theta.matrices, expected.matrices):
            assert np.array_equal(a, b)

    def test_fixed_seed_reproducible(self):
        vp = small_vp(s2=0.01)
        pat = pattern_for(vp, [1] * 8)
        a = sample_weights(vp, pat, np.random.default_rng(7)).theta
        b = sample_weights(vp, pat, np.random.default_rng(7)).theta
        assert all(np.array_equal(x, y) for x, y in zip(a.matrices, b.matrices))

    def test_dropped_rows_exactly_zero(self, rng):
        vp = small_vp(s2=0.5)
        bits = [1, 0, 0, 1, 0, 1, 1, 0]
        drawn = sample_weights(vp, pattern_for(vp, bits), rng)
        w1, w2, _ = drawn.theta.matrices
        rows = [w1[0], w1[1], w1[2], w1[3], w2[0], w2[1], w2[2], w2[3]]
        for row, b in zip(rows, bits):
            if not b:
                assert np.array_equal(row, np.zeros_like(row))
            else:
                assert np.any(row != 0.0)

    def test_monte_carlo_row_mean(self):
        # Mean of a kept row over n draws lands within 4 standard errors.
        vp = small_vp(s2=0.04)
        pat = pattern_for(vp, [1] * 8)
        rng = np.random.default_rng(11)
        n = 10_000
        acc = np.zeros(3)
        for _ in range(n):
            acc += sample_weights(vp, pat, rng).theta.matrices[0][0]
        se = math.sqrt(vp.s2) / math.sqrt(n)
        np.testing.assert_allclose(acc / n, vp.means.matrices[0][0], atol=4 * se)

    def test_pattern_length_mismatch_raises(self, rng):
        vp = small_vp()
        with pytest.raises(Exception):
            sample_weights(vp, DroppingPattern(np.ones(3, dtype=np.uint8)), rng)


class TestKlRegularizer:
    def test_zero_means_give_zero(self):
        vp = small_vp()
        for m in vp.means.matrices:
            m[:] = 0.0
        assert kl_regularizer(vp, pattern_for(vp, [1] * 8)) == 0.0

    def test_single_kept_row_three_four(self):
        spec = ModelSpec("mlp", 1, 2, 2, 1, readout_activation="identity")
        means = ModelParams(spec, [np.array([[3.0, 4.0], [9.0, 9.0]]), np.zeros((1, 2))])
        vp = VariationalParams(means, s2=0.0, prior_var=1.0)
        assert kl_regularizer(vp, DroppingPattern([1, 0])) == 12.5

    def test_doubling_prior_var_halves_value(self):
        a = small_vp(prior_var=1.0, seed=3)
        b = small_vp(prior_var=2.0, seed=3)
        pat = pattern_for(a, [1, 1, 0, 0, 1, 0, 1, 1])
        assert kl_regularizer(a, pat) == 2 * kl_regularizer(b, pat)

    def test_invariant_to_dropped_row_means(self):
        vp = small_vp(seed=4)
        pat = pattern_for(vp, [0, 1, 1, 1, 1, 1, 1, 1])
        before = kl_regularizer(vp, pat)
        vp.means.matrices[0][0] += 100.0
        assert kl_regularizer(vp, pat) == before


class TestTemperedLoss:
    def test_perfect_fit_with_flat_prior_vanishes(self, rng):
        # Zero hidden/readout residual and an effectively flat prior: both
        # objective terms go to zero.
        spec = ModelSpec("mlp", 1, 2, 2, 1, hidden_activation="identity",
                         readout_activation="identity")
        means = ModelParams(spec, [np.eye(2), np.array([[1.0, 0.0]])])
        vp = VariationalParams(means, s2=0.0, alpha=0.5, sigma2=1.0, prior_var=1e12)
        X = rng.standard_normal((8, 2))
        y = X[:, 0]
        loss, _ = tempered_loss(vp, DroppingPattern([1, 1]), X, y, "regression", rng)
        assert loss < 1e-10

    @pytest.mark.parametrize("task", ["regression", "classification"])
    def test_gradient_matches_finite_differences_with_frozen_noise(self, task):
        vp = small_vp(s2=0.01, seed=5)
        pat = pattern_for(vp, [1, 0, 1, 1, 1, 0, 1, 1])
        rng = np.random.default_rng(3)
        X = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 2)) if task == "regression" else rng.integers(0, 2, 6)

        _, grads = tempered_loss(vp, pat, X, y, task, np.random.default_rng(99))

        def loss_fn(p):
            frozen = VariationalParams(p, vp.s2, vp.alpha, vp.sigma2, vp.prior_var)
            val, _ = tempered_loss(frozen, pat, X, y, task, np.random.default_rng(99))
            return val

        numeric = finite_diff_grad(loss_fn, vp.means)
        worst = 0.0
        for a, b in zip(grads.matrices, numeric.matrices):
            worst = max(worst, float(np.max(np.abs(a - b) / (np.abs(a) + 1e-8))))
        assert worst < 1e-3

    def test_dropped_rows_get_exactly_zero_gradient(self, rng):
        vp = small_vp(s2=0.01, seed=6)
        bits = [1, 0, 1, 0, 1, 1, 0, 1]
        X = rng.standard_normal((5, 3))
        y = rng.integers(0, 2, 5)
        _, grads = tempered_loss(vp, pattern_for(vp, bits), X, y, "classification", rng)
        g1, g2 = grads.matrices[0], grads.matrices[1]
        rows = [g1[0], g1[1], g1[2], g1[3], g2[0], g2[1], g2[2], g2[3]]
        for row, b in zip(rows, bits):
            if not b:
                assert np.array_equal(row, np.zeros_like(row))

    def test_empty_batch_raises(self, rng):
        vp = small_vp()
        with pytest.raises(ValueError):
            tempered_loss(vp, pattern_for(vp, [1] * 8), np.zeros((0, 3)), np.zeros(0),
                          "regression", rng)

    def test_classification_grad_shape_and_sign(self, rng):
        logits = np.array([[10.0, -10.0]])
        value, grad = data_term(logits, np.array([0]), "classification", 0.5, 1.0)
        assert value < 1e-6  # confident and correct
        assert grad.shape == logits.shape


def mp_posterior_variance(S, m, d, D, B, L):
    with mpmath.workdps(60):
        S, m, d, D, B, L = map(mpmath.mpf, (S, m, d, D, B, L))
        bd = B * D
        brace = (d + 1 + 1 / (bd - 1)) ** 2 + 1 / (bd**2 - 1) + 2 / (bd - 1) ** 2
        val = S / (16 * m * d**2) / mpmath.log(3 * D) * (2 * bd) ** (-2 * L) / brace
        return float(val)


class TestPosteriorVariance:
    def test_halving_in_m_is_exact(self):
        for m in (10, 1000, 12345):
            assert posterior_variance(100, 2 * m, 7, 8, 2.0, 2) == (
                posterior_variance(100, m, 7, 8, 2.0, 2) / 2
            )

    def test_positive_and_monotone(self):
        base = posterior_variance(50, 100, 4, 8, 2.0, 1)
        assert base > 0
        assert posterior_variance(50, 200, 4, 8, 2.0, 1) < base
        assert posterior_variance(80, 100, 4, 8, 2.0, 1) > base

    def test_matches_high_precision_oracle_to_12_digits(self):
        args = (100, 1000, 784, 128, 2.0, 2)
        got = posterior_variance(*args)
        want = mp_posterior_variance(*args)
        assert abs(got - want) <= 0.5e-12 * abs(want)

    def test_domain_violations(self):
        with pytest.raises(ValueError):
            posterior_variance(0, 1, 1, 2, 2.0, 1)
        with pytest.raises(ValueError):
            posterior_variance(1, 1, 1, 2, 1.5, 1)
        with pytest.raises(ValueError):
            posterior_variance(1, 1, 1, 1, 2.0, 1)

    def test_deep_network_underflow_fallback_stays_positive(self):
        assert posterior_variance(100, 1000, 8, 64, 2.0, 200) > 0.0

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from badgeinf.mathkit import (OptimizerConfig, RngStream, chi_square_cdf, fit_logistic, kmeans,
                              kmeans_trace, log_gamma, logistic_sq_objective, augment,
                              maximize_positive, sample_gamma, sample_mvn, sample_poisson_process,
                              sample_wishart, sigmoid, stable_key)


class TestSpecialFunctions:
    @pytest.mark.parametrize("x,expected", [(1, 0.0), (0.5, 0.5 * math.log(math.pi)), (5, math.log(24))])
    def test_log_gamma(self, x, expected):
        assert log_gamma(x) == pytest.approx(expected, abs=1e-10)

    def test_log_gamma_domain(self):
        with pytest.raises(ValueError):
            log_gamma(0)

    def test_chi_square_examples(self):
        assert chi_square_cdf(0, 1) == 0.0
        assert chi_square_cdf(3.841, 1) == pytest.approx(0.95, abs=1e-3)
        assert chi_square_cdf(1.0464, 1) == pytest.approx(0.694, abs=2e-3)

    @given(st.floats(0, 200))
    def test_chi_square_df1_matches_erf(self, x):
        assert abs(chi_square_cdf(x, 1) - math.erf(math.sqrt(x / 2))) < 1e-8

    def test_chi_square_monotone(self):
        xs = np.linspace(0, 50, 400)
        vals = [chi_square_cdf(x, 3) for x in xs]
        assert np.all(np.diff(vals) >= 0)
        assert 0 <= min(vals) and max(vals) < 1

    def test_chi_square_negative(self):
        with pytest.raises(ValueError):
            chi_square_cdf(-1, 1)


class TestMaximizePositive:
    def test_quadratic(self):
        assert maximize_positive(lambda t: -(t[0] - 2) ** 2, [1.0])[0] == pytest.approx(2, abs=1e-3)

    def test_log_quadratic(self):
        assert maximize_positive(lambda t: -math.log(t[0]) ** 2, [5.0])[0] == pytest.approx(1, abs=1e-3)

    def test_two_dimensional(self):
        th = maximize_positive(lambda t: -(t[0] - 1) ** 2 - (t[1] - 3) ** 2, [2.0, 2.0])
        assert th == pytest.approx([1, 3], abs=1e-3)

    def test_with_gradient(self):
        f = lambda t: -(t[0] - 1) ** 2 - (t[1] - 3) ** 2
        g = lambda t: np.array([-2 * (t[0] - 1), -2 * (t[1] - 3)])
        assert maximize_positive(f, [2.0, 2.0], gradient=g) == pytest.approx([1, 3], abs=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0.1, 20))
    def test_never_worse_than_init(self, c, x0, scale):
        f = lambda t: -scale * (math.log(t[0]) - math.log(c)) ** 4
        assert f(maximize_positive(f, [x0], OptimizerConfig(max_iters=20))) >= f([x0])

    def test_rejects_nonpositive_init(self):
        with pytest.raises(ValueError):
            maximize_positive(lambda t: -t[0], [0.0])


class TestFitLogistic:
    def test_constant_targets(self):
        x = np.linspace(-2, 2, 9)[:, None]
        t = np.full(9, 0.5)
        w = fit_logistic(x, t, l2=0)
        assert logistic_sq_objective(w, augment(x), t, 0) <= logistic_sq_objective(np.zeros(2), augment(x), t, 0)
        assert sigmoid(augment(x) @ w) == pytest.approx(0.5, abs=1e-3)

    def test_separable_sign(self):
        w = fit_logistic(np.array([[-1.0], [1.0]]), np.array([0.0, 1.0]), l2=0.01)
        assert w[0] > 0

    def test_round_trip(self):
        x = np.arange(-2, 3, dtype=float)[:, None]
        t = sigmoid(2 * x[:, 0] + 1)
        w = fit_logistic(x, t, l2=0)
        assert np.max(np.abs(sigmoid(augment(x) @ w) - t)) < 0.02

    def test_rejects_out_of_range_targets(self):
        with pytest.raises(ValueError):
            fit_logistic(np.zeros((2, 1)), np.array([0.5, 1.5]))


class TestKmeans:
    def test_symmetric_clusters(self):
        pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
        centers, assign = kmeans(pts, 2, RngStream(0))
        got = sorted(map(tuple, np.round(centers, 9)))
        assert got == [(0, 0.5), (10, 0.5)]
        assert assign[0] == assign[1] != assign[2] == assign[3]

    def test_single_cluster_is_mean(self):
        pts = np.random.default_rng(1).normal(size=(30, 3))
        centers, _ = kmeans(pts, 1, RngStream(0))
        assert centers[0] == pytest.approx(pts.mean(axis=0))

    def test_k_equals_n(self):
        pts = np.random.default_rng(2).normal(size=(6, 2))
        _, _, hist = kmeans_trace(pts, 6, RngStream(0))
        assert hist[-1] == pytest.approx(0, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_inertia_nonincreasing(self, seed, k):
        pts = np.random.default_rng(seed).normal(size=(40, 2))
        _, _, hist = kmeans_trace(pts, k, RngStream(seed))
        assert np.all(np.diff(hist) <= 1e-9)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 1)), 3, 0)


class TestSamplers:
    def test_gamma_moments(self):
        x = sample_gamma(4, 0.4, RngStream(1), size=100_000)
        assert x.mean() == pytest.approx(10, abs=0.15)
        assert x.var() == pytest.approx(25, abs=1.5)

    def test_mvn_means(self):
        x = sample_mvn(np.zeros(2), np.eye(2), RngStream(2), size=100_000)
        assert np.all(np.abs(x.mean(axis=0)) < 0.01)

    def test_wishart_mean(self):
        s = np.array([[2.0, 1.0], [1.0, 2.0]])
        gen = RngStream(3).generator()
        mean = np.mean([sample_wishart(10, s, gen) for _ in range(10_000)], axis=0)
        assert np.all(np.abs(mean / (10 * s) - 1) < 0.05)

    def test_poisson_process_constant(self):
        gen = RngStream(4).generator()
        counts = [sample_poisson_process(lambda t: np.full(np.shape(t), 10.0), 10.0, (0, 100), gen).size
                  for _ in range(200)]
        assert abs(counts[0] - 1000) <= 95
        assert abs(np.mean(counts) - 1000) <= 7

    def test_poisson_process_zero_rate(self):
        assert sample_poisson_process(lambda t: np.zeros(np.shape(t)), 0.0, (0, 10), RngStream(0)).size == 0

    def test_poisson_process_trend(self):
        gen = RngStream(5).generator()
        rate = lambda t: 10 * (1 + 0.1 * np.asarray(t))
        counts = [sample_poisson_process(rate, 20.0, (0, 10), gen).size for _ in range(200)]
        assert abs(np.mean(counts) - 150) <= 2.6

    def test_poisson_process_sorted_in_window(self):
        ev = sample_poisson_process(lambda t: np.full(np.shape(t), 3.0), 3.0, (2, 7), RngStream(6))
        assert np.all(np.diff(ev) >= 0) and ev.min() >= 2 and ev.max() <= 7

    def test_bound_violation(self):
        with pytest.raises(ValueError):
            sample_poisson_process(lambda t: np.full(np.shape(t), 5.0), 1.0, (0, 10), RngStream(0))

    def test_reproducible_streams(self):
        a = sample_gamma(2, 1, RngStream(9, (1, 2)), size=5)
        b = sample_gamma(2, 1, RngStream(9, (1, 2)), size=5)
        c = sample_gamma(2, 1, RngStream(9, (1, 3)), size=5)
        assert np.array_equal(a, b) and not np.array_equal(a, c)
        assert RngStream(9).child(1, 2) == RngStream(9, (0, 1, 2))

    def test_stable_key(self):
        assert stable_key("u000001") == stable_key("u000001") != stable_key("u000002")

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from badgeinf.model_core import (BadgeSpec, GammaHyper, TraceStats, TraceValidationError, UserTrace,
                                 compute_stats, log_marginal_alt, log_marginal_null, poisson_loglik)

from conftest import make_trace


class TestComputeStats:
    def test_basic_split(self):
        s = compute_stats(make_trace(start=0, end=2, badge=1, events=[0.2, 0.5, 1.3, 1.9]))
        assert (s.l, s.l0, s.l1, s.n, s.n0, s.n1) == (2, 1, 1, 4, 2, 2)

    def test_no_badge_empty(self):
        s = compute_stats(make_trace(start=0, end=1, badge=None))
        assert (s.l, s.l0, s.l1, s.n, s.n0, s.n1) == (1, 1, 0, 0, 0, 0)
        assert not s.has_badge

    def test_event_at_badge_counts_after(self):
        s = compute_stats(make_trace(start=0, end=10, badge=4, events=[1, 2, 3, 4]))
        assert (s.n0, s.n1) == (3, 1)

    @given(st.lists(st.floats(0, 10, allow_nan=False), max_size=40), st.floats(0.01, 9.99))
    def test_additive_and_idempotent(self, events, b):
        t = make_trace(start=0, end=10, badge=b, events=sorted(events))
        s = compute_stats(t)
        assert s == compute_stats(t)
        assert s.n0 + s.n1 == s.n
        assert math.isclose(s.l0 + s.l1, s.l)


class TestTraceValidation:
    def test_badge_outside_window(self):
        with pytest.raises(TraceValidationError):
            make_trace(start=0, end=10, badge=12)

    def test_unsorted_events(self):
        with pytest.raises(TraceValidationError):
            make_trace(events=[3, 1])

    def test_events_outside_window(self):
        with pytest.raises(TraceValidationError):
            make_trace(events=[11])

    def test_bad_window(self):
        with pytest.raises(TraceValidationError):
            make_trace(start=5, end=5, badge=None)

    def test_badge_spec_threshold(self):
        with pytest.raises(ValueError):
            BadgeSpec(0.0, "answer", 0)


class TestMarginals:
    def test_null_examples(self):
        assert log_marginal_null(TraceStats(1, 1, 0, 0, 0, 0), GammaHyper(1, 1)) == pytest.approx(math.log(0.5))
        assert log_marginal_null(TraceStats(1, 1, 0, 1, 1, 0), GammaHyper(2, 1)) == pytest.approx(math.log(0.25))

    @pytest.mark.parametrize("a,b", [(0.5, 2.0), (3.0, 0.1), (1.0, 1.0)])
    def test_empty_window_is_certain(self, a, b):
        assert log_marginal_null(TraceStats(0, 0, 0, 0, 0, 0), GammaHyper(a, b)) == 0.0

    def test_alt_examples(self):
        p = GammaHyper(1, 1)
        assert log_marginal_alt(TraceStats(2, 1, 1, 0, 0, 0), p, p) == pytest.approx(2 * math.log(0.5))
        s = TraceStats(2, 1, 1, 1, 1, 0)
        assert log_marginal_alt(s, GammaHyper(2, 1), p) == pytest.approx(math.log(0.25) + math.log(0.5))

    def test_degenerate_split_equals_null(self):
        p = GammaHyper(2.5, 0.7)
        alt = log_marginal_alt(TraceStats(3.0, 3.0, 0.0, 7, 7, 0), p, p)
        assert alt == pytest.approx(log_marginal_null(TraceStats(3.0, 3.0, 0.0, 7, 7, 0), p))

    def test_alt_needs_badge(self):
        with pytest.raises(ValueError):
            log_marginal_alt(TraceStats(1, 1, 0, 0, 0, 0, has_badge=False), GammaHyper(1, 1), GammaHyper(1, 1))

    def test_large_counts_stay_finite(self):
        v = log_marginal_null(TraceStats(100, 100, 0, 5000, 5000, 0), GammaHyper(4, 0.4))
        assert np.isfinite(v)

    def test_invalid_hyper(self):
        with pytest.raises(ValueError):
            GammaHyper(0, 1)


class TestPoissonLoglik:
    def test_examples(self):
        assert poisson_loglik(2, 4, 2) == pytest.approx(4 * math.log(2) - 4)
        assert poisson_loglik(0, 0, 5) == 0.0
        assert poisson_loglik(1, 0, 3) == -3.0

    def test_zero_rate_with_events(self):
        assert poisson_loglik(0, 2, 1) == -math.inf

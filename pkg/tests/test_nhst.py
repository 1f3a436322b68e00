import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sstats

from badgeinf import nhst, synthgen
from badgeinf.mathkit import RngStream
from badgeinf.model_core import TraceStats, UserTrace

from conftest import make_trace


class TestLlr:
    @pytest.mark.parametrize("split,expected", [
        ((2, 1, 2, 1), 0.0),
        ((3, 1, 1, 1), 4 * math.log(2) - 3 * math.log(3)),
        ((4, 1, 0, 1), -4 * math.log(2)),
    ])
    def test_examples(self, split, expected):
        n0, l0, n1, l1 = split
        assert nhst.llr_statistic(TraceStats(2, l0, l1, 4, n0, n1)) == pytest.approx(expected, abs=1e-4)

    @settings(max_examples=300)
    @given(st.integers(0, 500), st.integers(0, 500), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_nonpositive(self, n0, n1, l0, l1):
        assert nhst.llr_statistic(TraceStats(l0 + l1, l0, l1, n0 + n1, n0, n1)) <= 0

    def test_requires_both_sides(self):
        with pytest.raises(ValueError):
            nhst.llr_statistic(TraceStats(2, 2, 0, 3, 3, 0))


class TestTheoreticPvalue:
    @pytest.mark.parametrize("llr,p,tol", [(0.0, 1.0, 1e-12), (-0.5232, 0.306, 3e-3), (-1.9205, 0.05, 1e-3)])
    def test_examples(self, llr, p, tol):
        assert nhst.theoretic_pvalue(llr) == pytest.approx(p, abs=tol)

    def test_monotone(self):
        llrs = np.linspace(-40, 0, 500)
        ps = [nhst.theoretic_pvalue(x) for x in llrs]
        assert np.all(np.diff(ps) >= 0)
        assert ps[0] > 0

    def test_positive_llr_rejected(self):
        with pytest.raises(ValueError):
            nhst.theoretic_pvalue(0.1)


class TestVirtualBadge:
    trace = make_trace(start=0, end=10, badge=5, events=np.linspace(0.25, 9.75, 39))
    cfg = nhst.BootstrapConfig(margin=1.0)

    def test_region_mass(self):
        gen = RngStream(0).generator()
        draws = np.array([nhst.sample_virtual_badge(self.trace, self.cfg, gen)[0] for _ in range(10_000)])
        assert np.all((draws <= 4) | (draws >= 6))
        assert np.mean(draws <= 4) == pytest.approx(0.5, abs=0.015)

    def test_window_rule(self):
        assert tuple(map(float, nhst.virtual_window(self.trace, 1.0, 2.0))) == (0.0, 4.0)
        assert tuple(map(float, nhst.virtual_window(self.trace, 1.0, 7.0))) == (6.0, 10.0)

    def test_events_clipped(self):
        gen = RngStream(1).generator()
        for _ in range(50):
            vb, vs, ve, ev = nhst.sample_virtual_badge(self.trace, self.cfg, gen)
            assert vs < vb < ve
            assert np.all((ev >= vs) & (ev <= ve))

    def test_no_room(self):
        with pytest.raises(ValueError):
            nhst.sample_virtual_badge(self.trace, nhst.BootstrapConfig(margin=6.0), RngStream(0))


class TestBootstrap:
    def test_zero_statistic(self):
        assert nhst.empirical_pvalue(0.0, [0.0, 0.3, 2.0]) == 1.0

    def test_counting(self):
        assert nhst.empirical_pvalue(0.25, [0.1, 0.2, 0.3, 0.4]) == 0.5

    def test_smoothed(self):
        assert nhst.empirical_pvalue(0.25, [0.1, 0.2, 0.3, 0.4], smoothed=True) == pytest.approx(3 / 5)

    def test_equal_rates_gives_one(self):
        t = make_trace(start=0, end=2, badge=1, events=[0.2, 0.5, 1.3, 1.9])
        assert nhst.bootstrap_pvalue(t, nhst.BootstrapConfig(B=50, margin=0.1)) == 1.0

    def test_null_users_uniform(self):
        ds = synthgen.generate_dataset(synthgen.SyntheticConfig(n_users=400, pi=0.0, seed=0))
        cfg = nhst.BootstrapConfig(B=200, seed=0)
        ps = [nhst.bootstrap_pvalue(t, cfg) for t in ds.traced_users]
        assert len(ps) == 200
        assert sstats.kstest(ps, "uniform").pvalue > 0.01

    def test_translation_invariance(self):
        t = make_trace(start=0, end=10, badge=4, events=np.sort(np.random.default_rng(0).uniform(0, 10, 60)))
        shifted = make_trace(start=100, end=110, badge=104, events=t.events + 100)
        cfg = nhst.BootstrapConfig(B=100, margin=0.5)
        assert nhst.bootstrap_pvalue(t, cfg, RngStream(3)) == nhst.bootstrap_pvalue(shifted, cfg, RngStream(3))

    def test_time_rescaling_invariance(self):
        t = make_trace(start=0, end=10, badge=4, events=np.sort(np.random.default_rng(1).uniform(0, 10, 60)))
        scaled = make_trace(start=0, end=30, badge=12, events=t.events * 3)
        p1 = nhst.bootstrap_pvalue(t, nhst.BootstrapConfig(B=100, margin=0.5), RngStream(4))
        p2 = nhst.bootstrap_pvalue(scaled, nhst.BootstrapConfig(B=100, margin=1.5), RngStream(4))
        assert p1 == pytest.approx(p2)

    def test_per_user_stream_is_order_free(self, small_dataset):
        cfg = nhst.BootstrapConfig(B=30, seed=2)
        users = small_dataset.traced_users[:6]
        a = {o.user_id: o.p_bootstrap for o in nhst.evaluate_users(users, cfg)}
        b = {o.user_id: o.p_bootstrap for o in nhst.evaluate_users(users[::-1], cfg)}
        assert a == b


class TestClassify:
    @pytest.mark.parametrize("p,group", [(0.01, "P"), (0.05, "N"), (0.30, "N")])
    def test_threshold(self, p, group):
        o = nhst.TestOutcome("u", -1.0, 2.0, p, p, None)
        assert nhst.classify([o], 0.05, use_bootstrap=True) == [group]
        assert nhst.classify([o], 0.05, use_bootstrap=False) == [group]

    def test_untestable_user_reported(self):
        users = [make_trace("a", badge=None, events=[1, 2]), make_trace("b", events=np.linspace(0.5, 9.5, 30))]
        out = nhst.evaluate_users(users, nhst.BootstrapConfig(B=20))
        assert [o.testable for o in out] == [False, True]
        assert out[0].row()["group"] == "untestable"
        assert nhst.classify(out)[0] is None

    def test_threads_do_not_change_results(self, small_dataset):
        cfg = nhst.BootstrapConfig(B=30, seed=4)
        users = small_dataset.traced_users[:12]
        one = [o.row() for o in nhst.evaluate_users(users, cfg, threads=1)]
        two = [o.row() for o in nhst.evaluate_users(users, cfg, threads=2)]
        assert one == two

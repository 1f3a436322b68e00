"""Per-user likelihood-ratio test for a rate change at the badge time.

p-values come either from the asymptotic chi-square(1) law of -2 LLR or from
placebo ("virtual") badges drawn away from the real one, which estimate the
statistic's null distribution from the user's own trace.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .mathkit import RngStream, as_generator, chi_square_cdf, chi_square_sf, stable_key
from .model_core import TraceStats, UserTrace, compute_stats

log = logging.getLogger(__name__)

MAX_REDRAWS = 10


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 200
    margin: float | None = None  # None: per-user default, see default_margin
    alpha: float = 0.05
    seed: int = 0
    smoothed: bool = False

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("need at least one virtual badge")
        if self.margin is not None and self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class TestOutcome:
    __test__ = False

    user_id: str
    llr: float
    stat: float
    p_theoretic: float
    p_bootstrap: float | None
    group: str | None  # "P", "N", or None when untestable
    testable: bool = True
    note: str = ""

    def row(self) -> dict:
        return {
            "user_id": self.user_id,
            "llr": self.llr,
            "stat": self.stat,
            "p_theoretic": self.p_theoretic,
            "p_bootstrap": self.p_bootstrap,
            "group": self.group if self.testable else "untestable",
        }


def raw_llr_arrays(n, l, n0, l0, n1, l1):
    """Vectorised LLR with plug-in rate MLEs; the linear terms cancel."""
    n, n0, n1 = (np.asarray(a, dtype=float) for a in (n, n0, n1))
    l, l0, l1 = (np.asarray(a, dtype=float) for a in (l, l0, l1))
    return xlogy(n, n / l) - xlogy(n0, n0 / l0) - xlogy(n1, n1 / l1)


def llr_arrays(n, l, n0, l0, n1, l1):
    # equal split rates can round to a tiny positive value
    return np.minimum(raw_llr_arrays(n, l, n0, l0, n1, l1), 0.0)


def llr_statistic(stats: TraceStats) -> float:
    if not (stats.l > 0 and stats.l0 > 0 and stats.l1 > 0):
        raise ValueError("rate MLEs need positive durations before and after the badge")
    return float(llr_arrays(stats.n, stats.l, stats.n0, stats.l0, stats.n1, stats.l1))


def theoretic_pvalue(llr: float) -> float:
    if llr > 1e-9:
        raise ValueError(f"log-likelihood ratio must be <= 0, got {llr}")
    stat = max(-2.0 * llr, 0.0)
    return float(1.0 - chi_square_cdf(stat, 1)) if stat < 1.0 else float(chi_square_sf(stat, 1))


def default_margin(trace: UserTrace) -> float:
    l = trace.end - trace.start
    mean_gap = l / max(trace.events.size, 1)
    return max(0.01 * l, 2.0 * mean_gap)


def _regions(trace: UserTrace, margin: float):
    s, e, b = trace.start, trace.end, trace.badge_time
    return max(0.0, (b - margin) - s), max(0.0, e - (b + margin))


def _draw_badges(trace, margin, size, gen):
    """Virtual badges uniform on [s, b-m] u [b+m, e], plus their sub-windows."""
    s, e, b = trace.start, trace.end, trace.badge_time
    left, right = _regions(trace, margin)
    total = left + right
    if total <= 0:
        raise ValueError(f"user {trace.user_id}: no room for virtual badges with margin {margin}")
    u = gen.random(size) * total
    vb = np.where(u < left, s + u, b + margin + (u - left))
    return (vb,) + virtual_window(trace, margin, vb)


def virtual_window(trace: UserTrace, margin: float, virtual_badge):
    """The window shrinks to the side of the real badge the virtual one falls on."""
    before = np.asarray(virtual_badge) < trace.badge_time
    vs = np.where(before, trace.start, trace.badge_time + margin)
    ve = np.where(before, trace.badge_time - margin, trace.end)
    return vs, ve


def sample_virtual_badge(trace: UserTrace, cfg: BootstrapConfig, rng):
    """One virtual badge with its shifted window and the events inside it."""
    if not trace.has_badge:
        raise ValueError("virtual badges need a real badge time")
    margin = cfg.margin if cfg.margin is not None else default_margin(trace)
    vb, vs, ve = _draw_badges(trace, margin, 1, as_generator(rng))
    vb, vs, ve = float(vb[0]), float(vs[0]), float(ve[0])
    ev = trace.events
    return vb, vs, ve, ev[(ev >= vs) & (ev <= ve)]


def empirical_pvalue(stat: float, replicate_stats, smoothed: bool = False) -> float:
    """Share of replicates at least as extreme as ``stat`` on the -2 LLR scale."""
    reps = np.asarray(replicate_stats, dtype=float)
    hits = int(np.sum(reps >= stat - 1e-12 * max(1.0, abs(stat))))
    if smoothed:
        return (hits + 1) / (reps.size + 1)
    return hits / reps.size


def bootstrap_replicates(trace: UserTrace, cfg: BootstrapConfig, rng) -> np.ndarray:
    """-2 LLR at B virtual badges; degenerate splits are redrawn, then dropped."""
    margin = cfg.margin if cfg.margin is not None else default_margin(trace)
    gen = as_generator(rng)
    ev = trace.events
    stats = []
    need = cfg.B
    for _ in range(MAX_REDRAWS + 1):
        vb, vs, ve = _draw_badges(trace, margin, need, gen)
        l0, l1 = vb - vs, ve - vb
        ok = (l0 > 0) & (l1 > 0)
        lo = np.searchsorted(ev, vs[ok], side="left")
        mid = np.searchsorted(ev, vb[ok], side="left")
        hi = np.searchsorted(ev, ve[ok], side="right")
        n0, n1 = mid - lo, hi - mid
        llr = llr_arrays(n0 + n1, l0[ok] + l1[ok], n0, l0[ok], n1, l1[ok])
        stats.append(-2.0 * llr)
        need = int((~ok).sum())
        if need == 0:
            break
    reps = np.concatenate(stats)
    if reps.size < max(10, cfg.B // 10):
        raise ValueError(f"user {trace.user_id}: only {reps.size} usable virtual badges")
    return reps


def bootstrap_pvalue(trace: UserTrace, cfg: BootstrapConfig, rng=None) -> float:
    stats = compute_stats(trace)
    stat = -2.0 * llr_statistic(stats)
    if rng is None:
        rng = user_stream(cfg.seed, trace.user_id)
    return empirical_pvalue(stat, bootstrap_replicates(trace, cfg, rng), cfg.smoothed)


def user_stream(seed: int, user_id: str) -> RngStream:
    return RngStream(seed, (stable_key(user_id),))


def classify(outcomes, alpha: float = 0.05, use_bootstrap: bool = True) -> list[str | None]:
    groups = []
    for o in outcomes:
        if not o.testable:
            groups.append(None)
            continue
        p = o.p_bootstrap if use_bootstrap else o.p_theoretic
        if p is None:
            raise ValueError(f"user {o.user_id} has no {'bootstrap' if use_bootstrap else 'theoretic'} p-value")
        groups.append("P" if p < alpha else "N")
    return groups


def evaluate_user(trace: UserTrace, cfg: BootstrapConfig, bootstrap: bool = True) -> TestOutcome:
    nan = math.nan
    if not trace.has_badge:
        return TestOutcome(trace.user_id, nan, nan, nan, None, None, False, "no badge")
    stats = compute_stats(trace)
    if not (stats.l0 > 0 and stats.l1 > 0):
        return TestOutcome(trace.user_id, nan, nan, nan, None, None, False, "empty pre- or post-badge window")
    llr = llr_statistic(stats)
    p_theo = theoretic_pvalue(llr)
    p_boot = None
    note = ""
    if bootstrap:
        try:
            p_boot = bootstrap_pvalue(trace, cfg)
        except ValueError as exc:
            return TestOutcome(trace.user_id, llr, -2.0 * llr, p_theo, None, None, False, str(exc))
    p = p_boot if bootstrap else p_theo
    return TestOutcome(trace.user_id, llr, -2.0 * llr, p_theo, p_boot, "P" if p < cfg.alpha else "N", True, note)


def _test_chunk(args):
    traces, cfg, bootstrap = args
    return [evaluate_user(t, cfg, bootstrap) for t in traces]


def evaluate_users(traces, cfg: BootstrapConfig | None = None, bootstrap: bool = True,
                   threads: int = 1) -> list[TestOutcome]:
    """Test every user; results do not depend on ``threads`` (per-user streams)."""
    cfg = cfg or BootstrapConfig()
    traces = list(traces)
    if threads <= 1 or len(traces) < 2:
        out = _test_chunk((traces, cfg, bootstrap))
    else:
        chunks = [traces[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_test_chunk, [(c, cfg, bootstrap) for c in chunks]))
        by_id = {o.user_id: o for part in parts for o in part}
        out = [by_id[t.user_id] for t in traces]
    bad = [o for o in out if not o.testable]
    if bad:
        log.warning("%d users untestable", len(bad))
    return out

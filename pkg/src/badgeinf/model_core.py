"""Badge and user data model, per-user sufficient statistics and the
gamma-Poisson collapsed likelihoods shared by all inference code.

Times are plain real numbers ("days"). A user who never received the badge
carries ``badge_time=None``; no numeric sentinel ever enters arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, xlogy


class TraceValidationError(ValueError):
    """Raised for traces that break the window/event invariants."""


@dataclass(frozen=True)
class BadgeSpec:
    introduction_time: float
    action_type: str
    threshold: int

    def __post_init__(self):
        if not math.isfinite(self.introduction_time):
            raise ValueError("badge introduction time must be finite")
        if int(self.threshold) != self.threshold or self.threshold < 1:
            raise ValueError(f"badge threshold must be a positive integer, got {self.threshold!r}")


@dataclass(frozen=True, eq=False)
class UserTrace:
    """One user's activity window in the context of a badge."""

    user_id: str
    start: float
    end: float
    badge_time: float | None
    events: np.ndarray
    covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    truth: int | None = None

    def __post_init__(self):
        events = np.asarray(self.events, dtype=float).reshape(-1)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float).reshape(-1))
        if not (math.isfinite(self.start) and math.isfinite(self.end)) or self.end <= self.start:
            raise TraceValidationError(f"user {self.user_id}: need start < end, got [{self.start}, {self.end}]")
        if events.size:
            if np.any(np.diff(events) < 0):
                raise TraceValidationError(f"user {self.user_id}: events are not sorted")
            if events[0] < self.start or events[-1] > self.end:
                raise TraceValidationError(f"user {self.user_id}: events outside [start, end]")
        if self.badge_time is not None:
            b = self.badge_time
            if not (math.isfinite(b) and self.start < b < self.end):
                raise TraceValidationError(f"user {self.user_id}: badge time {b} not inside ({self.start}, {self.end})")
        if self.truth is not None and self.truth not in (0, 1):
            raise TraceValidationError(f"user {self.user_id}: truth label must be 0 or 1")

    @property
    def has_badge(self) -> bool:
        return self.badge_time is not None


@dataclass(frozen=True)
class TraceStats:
    l: float
    l0: float
    l1: float
    n: int
    n0: int
    n1: int
    has_badge: bool = True


@dataclass(frozen=True)
class GammaHyper:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0 and math.isfinite(self.shape) and math.isfinite(self.rate)):
            raise ValueError(f"gamma hyperparameters must be positive and finite, got ({self.shape}, {self.rate})")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


def compute_stats(trace: UserTrace) -> TraceStats:
    l = trace.end - trace.start
    n = int(trace.events.size)
    if trace.badge_time is None:
        return TraceStats(l=l, l0=l, l1=0.0, n=n, n0=n, n1=0, has_badge=False)
    b = trace.badge_time
    # events at exactly b belong to the post-badge regime
    n0 = int(np.searchsorted(trace.events, b, side="left"))
    return TraceStats(l=l, l0=b - trace.start, l1=trace.end - b, n=n, n0=n0, n1=n - n0)


def gamma_poisson_logml(n, l, shape, rate):
    """Vectorised log of the Poisson-process likelihood with a Gamma(shape, rate)
    intensity integrated out, without the n-dependent base-measure constant."""
    n = np.asarray(n, dtype=float)
    l = np.asarray(l, dtype=float)
    return (
        xlogy(shape, rate)
        - (shape + n) * np.log(l + rate)
        + gammaln(shape + n)
        - gammaln(shape)
    )


def log_marginal_null(stats: TraceStats, prior: GammaHyper) -> float:
    return float(gamma_poisson_logml(stats.n, stats.l, prior.shape, prior.rate))


def log_marginal_alt(stats: TraceStats, prior0: GammaHyper, prior1: GammaHyper) -> float:
    if not stats.has_badge:
        raise ValueError("the changed-rate likelihood needs a finite badge time")
    before = gamma_poisson_logml(stats.n0, stats.l0, prior0.shape, prior0.rate)
    after = gamma_poisson_logml(stats.n1, stats.l1, prior1.shape, prior1.rate)
    return float(before + after)


def poisson_loglik(rate: float, n: int, l: float) -> float:
    """n log(rate) - rate * l, with 0 log 0 = 0 and -inf when rate = 0 < n."""
    if rate < 0 or l < 0:
        raise ValueError("rate and duration must be nonnegative")
    if rate == 0:
        return 0.0 if n == 0 else -math.inf
    return float(xlogy(n, rate) - rate * l)


def stats_arrays(traces) -> dict[str, np.ndarray]:
    """Stack TraceStats of many traces into column arrays."""
    stats = [compute_stats(t) for t in traces]
    cols = {}
    for name in ("l", "l0", "l1", "n", "n0", "n1"):
        cols[name] = np.array([getattr(s, name) for s in stats], dtype=float)
    cols["has_badge"] = np.array([s.has_badge for s in stats], dtype=bool)
    return cols

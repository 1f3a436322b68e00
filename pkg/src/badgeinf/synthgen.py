"""Synthetic users for the simulation study.

Half of the users get a full trace (window, badge time, events, covariates),
the other half only covariates. Rates are gamma distributed with mean 10 and
variance 25; affected users run at a higher rate before the badge than after
it, by ``2 * delta_lambda``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .mathkit import RngStream, sample_gamma, sample_mvn, sample_poisson_process, sample_wishart
from .model_core import UserTrace

RATE_MEAN = 10.0
RATE_VAR = 25.0
BADGE_COUNT = 100.0
WISHART_DF = 10
WISHART_SCALE = np.array([[2.0, 1.0], [1.0, 2.0]])


@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 1000
    pi: float = 0.5
    delta_lambda: float = 1.0
    delta_x: float = 1.0
    trend: float = 0.0
    seed: int = 0
    per_user_sigma: bool = False

    def __post_init__(self):
        if self.n_users < 2 or self.n_users % 2:
            raise ValueError("n_users must be a positive even number")
        if not 0 <= self.pi <= 1:
            raise ValueError("pi must lie in [0, 1]")
        if not 0 <= self.delta_lambda < RATE_MEAN:
            raise ValueError(f"delta_lambda must lie in [0, {RATE_MEAN})")
        if self.delta_x < 0 or self.trend < 0:
            raise ValueError("delta_x and trend must be nonnegative")


@dataclass(frozen=True)
class Intensities:
    label: int
    rate0: float | None = None  # constant rate (label 0)
    before: float | None = None  # label 1, up to the badge
    after: float | None = None  # label 1, after the badge

    @property
    def badge_rate(self) -> float:
        return self.rate0 if self.label == 0 else self.before


@dataclass(frozen=True)
class FeatureUser:
    user_id: str
    covariates: np.ndarray
    truth: int


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    traced_users: list[UserTrace]
    feature_only_users: list[FeatureUser]
    sigma: np.ndarray
    s_max: float
    v_max: np.ndarray
    intensities: dict[str, Intensities] = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "config": asdict(self.config),
            "sigma": self.sigma.tolist(),
            "s_max": self.s_max,
            "v_max": self.v_max.tolist(),
            "intensities": {k: asdict(v) for k, v in self.intensities.items()},
        }


def _gamma_by_moments(mean, var, gen):
    return float(sample_gamma(mean * mean / var, mean / var, gen))


def sample_intensities(label: int, delta_lambda: float, rng) -> Intensities:
    if not 0 <= delta_lambda < RATE_MEAN:
        raise ValueError(f"delta_lambda must lie in [0, {RATE_MEAN})")
    if label == 0:
        return Intensities(0, rate0=_gamma_by_moments(RATE_MEAN, RATE_VAR, rng))
    after = _gamma_by_moments(RATE_MEAN - delta_lambda, RATE_VAR, rng)
    return Intensities(1, before=after + 2.0 * delta_lambda, after=after)


def place_badge(label: int, intensities: Intensities, rng) -> tuple[float, float, float]:
    """Returns (start, badge, end)."""
    rate = intensities.rate0 if label == 0 else intensities.before
    if not rate > 0:
        raise ValueError("badge placement needs a positive rate")
    b = BADGE_COUNT / rate
    return 0.0, b, b * (1.0 + float(rng.random()))


def rate_function(intensities: Intensities, badge_time: float, trend: float = 0.0):
    if intensities.label == 0:
        def base(t):
            return np.full(np.shape(t), intensities.rate0)
    else:
        def base(t):
            return np.where(np.asarray(t) <= badge_time, intensities.before, intensities.after)
    if trend == 0:
        return base
    return lambda t: base(t) * (1.0 + trend * np.asarray(t))


def sample_trace(label: int, intensities: Intensities, window, trend: float, rng) -> np.ndarray:
    s, b, e = window
    peak = intensities.rate0 if label == 0 else max(intensities.before, intensities.after)
    bound = peak * (1.0 + trend * e)
    return sample_poisson_process(rate_function(intensities, b, trend), bound, (s, e), rng)


def dominant_direction(sigma) -> tuple[float, np.ndarray]:
    vals, vecs = np.linalg.eigh(np.asarray(sigma, dtype=float))
    v = vecs[:, -1]
    if v.sum() < 0:
        v = -v
    return float(vals[-1]), v


def sample_covariates(label: int, delta_x: float, sigma, s_max: float, v_max, rng) -> np.ndarray:
    mean = np.zeros(len(v_max)) if label == 0 else delta_x * s_max * np.asarray(v_max)
    return sample_mvn(mean, sigma, rng)


def generate_dataset(cfg: SyntheticConfig) -> SyntheticDataset:
    root = RngStream(cfg.seed)
    sigma = sample_wishart(WISHART_DF, WISHART_SCALE, root.child(0).generator())
    s_max, v_max = dominant_direction(sigma)
    half = cfg.n_users // 2
    traced, feature_only, rates = [], [], {}
    for idx in range(cfg.n_users):
        gen = root.child(1, idx).generator()
        user_id = f"u{idx:06d}"
        label = int(gen.random() < cfg.pi)
        user_sigma = sample_wishart(WISHART_DF, WISHART_SCALE, gen) if cfg.per_user_sigma else sigma
        if idx < half:
            lam = sample_intensities(label, cfg.delta_lambda, gen)
            s, b, e = place_badge(label, lam, gen)
            events = sample_trace(label, lam, (s, b, e), cfg.trend, gen)
            x = sample_covariates(label, cfg.delta_x, user_sigma, s_max, v_max, gen)
            traced.append(UserTrace(user_id, s, e, b, events, x, label))
            rates[user_id] = lam
        else:
            x = sample_covariates(label, cfg.delta_x, user_sigma, s_max, v_max, gen)
            feature_only.append(FeatureUser(user_id, x, label))
    return SyntheticDataset(cfg, traced, feature_only, sigma, s_max, v_max, rates)

"""Mixture clustering of users' counting processes.

Two latent classes: a constant-rate class (one gamma-distributed rate) and a
changed-behaviour class (separate gamma-distributed rates before and after
the badge). Intensities are integrated out, so each user contributes a
closed-form collapsed likelihood per class, and EM alternates between class
responsibilities and the gamma hyperparameters. Optionally the class prior is
personalised through a logistic function of the user's covariates, which also
gives predictions for users without a trace.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, log_expit

from .mathkit import (OptimizerConfig, RngStream, as_generator, augment, fit_logistic,
                      maximize_positive, sigmoid)
from .model_core import GammaHyper, gamma_poisson_logml, stats_arrays

log = logging.getLogger(__name__)

PI_CLAMP = 1e-6


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    tolerance: float = 1e-6
    restarts: int = 3
    l2: float = 1e-4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass
class PoissonMixtureModel:
    theta0: GammaHyper
    theta1: tuple[GammaHyper, GammaHyper]
    pi: float | None = None
    w: np.ndarray | None = None
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None

    @property
    def covariate_mode(self) -> bool:
        return self.w is not None

    def standardize(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x - self.x_mean) / self.x_scale

    def prior_logits(self, covariates=None, n_users=None, standardized=False) -> np.ndarray:
        """Logit of the (clamped) per-user prior probability of the changed class."""
        if self.covariate_mode:
            xs = covariates if standardized else self.standardize(covariates)
            p = sigmoid(augment(xs) @ self.w)
        else:
            p = np.full(n_users if n_users is not None else len(covariates), self.pi)
        p = np.clip(p, PI_CLAMP, 1 - PI_CLAMP)
        return np.log(p) - np.log1p(-p)

    def to_dict(self) -> dict:
        d = {
            "kind": "poisson_mixture",
            "theta0": [self.theta0.shape, self.theta0.rate],
            "theta1_before": [self.theta1[0].shape, self.theta1[0].rate],
            "theta1_after": [self.theta1[1].shape, self.theta1[1].rate],
            "pi": self.pi,
        }
        if self.covariate_mode:
            d["w"] = self.w.tolist()
            d["x_mean"] = self.x_mean.tolist()
            d["x_scale"] = self.x_scale.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoissonMixtureModel":
        w = d.get("w")
        return cls(
            theta0=GammaHyper(*d["theta0"]),
            theta1=(GammaHyper(*d["theta1_before"]), GammaHyper(*d["theta1_after"])),
            pi=d.get("pi"),
            w=None if w is None else np.asarray(w, dtype=float),
            x_mean=None if w is None else np.asarray(d["x_mean"], dtype=float),
            x_scale=None if w is None else np.asarray(d["x_scale"], dtype=float),
        )


@dataclass
class Responsibilities:
    gamma: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ValueError("responsibilities must lie in [0, 1]")


@dataclass
class EmTrace:
    complete_loglik: list[float] = field(default_factory=list)
    observed_loglik: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    non_improving_steps: int = 0

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_observed_loglik": self.observed_loglik[-1] if self.observed_loglik else None,
            "non_improving_steps": self.non_improving_steps,
        }


class _Data:
    """Column arrays of the fitted users."""

    def __init__(self, traces):
        if any(not t.has_badge for t in traces):
            raise ValueError("every trace needs a finite badge time")
        cols = stats_arrays(traces)
        self.n, self.l = cols["n"], cols["l"]
        self.n0, self.l0 = cols["n0"], cols["l0"]
        self.n1, self.l1 = cols["n1"], cols["l1"]
        self.size = len(traces)


def _class_logliks(data: _Data, model: PoissonMixtureModel):
    t0, (tb, ta) = model.theta0, model.theta1
    lp0 = gamma_poisson_logml(data.n, data.l, t0.shape, t0.rate)
    lp1 = (gamma_poisson_logml(data.n0, data.l0, tb.shape, tb.rate)
           + gamma_poisson_logml(data.n1, data.l1, ta.shape, ta.rate))
    return lp0, lp1


def _posterior(lp0, lp1, prior_logit):
    """Responsibilities and per-user observed log-likelihood."""
    log_pi = log_expit(prior_logit)
    log_1mpi = log_expit(-prior_logit)
    a = lp1 + log_pi
    b = lp0 + log_1mpi
    gamma = expit(a - b)
    obs = np.logaddexp(a, b)
    return gamma, obs


def _responsibilities(traces, model, covariates=None):
    data = traces if isinstance(traces, _Data) else _Data(traces)
    lp0, lp1 = _class_logliks(data, model)
    if model.covariate_mode:
        if covariates is None:
            covariates = np.vstack([t.covariates for t in traces])
        logits = model.prior_logits(covariates)
    else:
        logits = model.prior_logits(n_users=data.size)
    return _posterior(lp0, lp1, logits)


def e_step(traces, model: PoissonMixtureModel, covariates=None) -> Responsibilities:
    gamma, _ = _responsibilities(traces, model, covariates)
    return Responsibilities(gamma)


def observed_loglik(traces, model: PoissonMixtureModel, covariates=None) -> float:
    _, obs = _responsibilities(traces, model, covariates)
    return float(obs.sum())


def m_step_mixing(resp: Responsibilities) -> float:
    g = np.asarray(resp.gamma)
    if g.size < 1:
        raise ValueError("need at least one user")
    return float(np.clip(g.mean(), PI_CLAMP, 1 - PI_CLAMP))


def _mixing_objective(w, xa, gamma):
    p = np.clip(sigmoid(xa @ w), PI_CLAMP, 1 - PI_CLAMP)
    return float(np.sum(gamma * np.log(p) + (1 - gamma) * np.log1p(-p)))


def m_step_mixing_covariates(covariates, resp: Responsibilities, l2: float = 1e-4,
                             previous=None) -> np.ndarray:
    """Squared-error logistic fit of the prior to the responsibilities.

    With ``previous`` weights, the update is only accepted when it does not
    lower the expected complete-data log-likelihood of the mixing part, so the
    EM ascent property survives the non-likelihood objective.
    """
    x = np.asarray(covariates, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates must be finite")
    w = fit_logistic(x, resp.gamma, l2=l2, init=previous)
    if previous is not None:
        xa = augment(x)
        if _mixing_objective(w, xa, resp.gamma) < _mixing_objective(previous, xa, resp.gamma):
            return np.asarray(previous, dtype=float)
    return w


def _hyper_objective(weights, n, l):
    def f(theta):
        a, b = theta
        return float(weights @ gamma_poisson_logml(n, l, a, b))

    def grad(theta):
        a, b = theta
        da = np.log(b) - np.log(l + b) + digamma(a + n) - digamma(a)
        db = a / b - (a + n) / (l + b)
        return np.array([weights @ da, weights @ db])

    return f, grad


def _fit_gamma(weights, n, l, current: GammaHyper, config: OptimizerConfig) -> tuple[GammaHyper, bool]:
    if weights.sum() <= 0:
        return current, True
    f, grad = _hyper_objective(weights, n, l)
    init = np.array([current.shape, current.rate])
    theta = maximize_positive(f, init, config, gradient=grad, log_bounds=(-12.0, 12.0))
    improved = f(theta) >= f(init)
    return GammaHyper(float(theta[0]), float(theta[1])), improved


def m_step_hyper(traces, resp: Responsibilities, current: PoissonMixtureModel | None = None,
                 config: OptimizerConfig | None = None):
    """Maximise the responsibility-weighted collapsed likelihoods; the
    changed-behaviour objective splits into independent before/after parts."""
    data = traces if isinstance(traces, _Data) else _Data(traces)
    if data.size < 1:
        raise ValueError("need at least one user")
    config = config or OptimizerConfig()
    g = np.asarray(resp.gamma, dtype=float)
    if current is None:
        current = _moment_model(data, g)
    t0, _ = _fit_gamma(1 - g, data.n, data.l, current.theta0, config)
    tb, _ = _fit_gamma(g, data.n0, data.l0, current.theta1[0], config)
    ta, _ = _fit_gamma(g, data.n1, data.l1, current.theta1[1], config)
    return t0, (tb, ta)


def _moment_gamma(rates, weights) -> GammaHyper:
    wsum = weights.sum()
    if wsum <= 1e-12:
        weights, wsum = np.ones_like(rates), rates.size
    m = float(weights @ rates / wsum)
    v = float(weights @ (rates - m) ** 2 / wsum)
    m = max(m, 1e-3)
    v = max(v, 1e-3 * m * m)
    return GammaHyper(m * m / v, m / v)


def _moment_model(data: _Data, gamma) -> PoissonMixtureModel:
    return PoissonMixtureModel(
        theta0=_moment_gamma(data.n / data.l, 1 - gamma),
        theta1=(_moment_gamma(data.n0 / data.l0, gamma), _moment_gamma(data.n1 / data.l1, gamma)),
        pi=float(np.clip(gamma.mean(), PI_CLAMP, 1 - PI_CLAMP)),
    )


def rate_change(data: _Data, eps: float = 1e-9) -> np.ndarray:
    """|before rate - after rate| relative to the overall rate."""
    return np.abs(data.n0 / data.l0 - data.n1 / data.l1) / (data.n / data.l + eps)


def initial_responsibilities(data: _Data, gen=None, jitter: float = 0.0) -> np.ndarray:
    z = rate_change(data)
    spread = z.std() + 1e-9
    logit = (z - np.median(z)) / spread
    if jitter and gen is not None:
        logit = logit + jitter * gen.standard_normal(z.size)
    return expit(logit)


def _standardization(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _run_em(data, xs, gamma, config: EmConfig, covariate_mode: bool, x_mean, x_scale):
    model = _moment_model(data, gamma)
    if covariate_mode:
        model.pi = None
        model.w = m_step_mixing_covariates(xs, Responsibilities(gamma), config.l2)
        model.x_mean, model.x_scale = x_mean, x_scale
    trace = EmTrace()
    lp0, lp1 = _class_logliks(data, model)
    prev = None
    for it in range(config.max_iters):
        logits = model.prior_logits(xs, n_users=data.size, standardized=True)
        gamma, obs = _posterior(lp0, lp1, logits)
        ll = float(obs.sum())
        trace.observed_loglik.append(ll)
        trace.iterations = it + 1
        if prev is not None and abs(ll - prev) <= config.tolerance * max(1.0, abs(prev)):
            trace.converged = True
            break
        prev = ll
        resp = Responsibilities(gamma)
        if covariate_mode:
            model.w = m_step_mixing_covariates(xs, resp, config.l2, previous=model.w)
        else:
            model.pi = m_step_mixing(resp)
        t0, ok0 = _fit_gamma(1 - gamma, data.n, data.l, model.theta0, config.optimizer)
        tb, ok1 = _fit_gamma(gamma, data.n0, data.l0, model.theta1[0], config.optimizer)
        ta, ok2 = _fit_gamma(gamma, data.n1, data.l1, model.theta1[1], config.optimizer)
        if not (ok0 and ok1 and ok2):
            trace.non_improving_steps += 1
        model.theta0, model.theta1 = t0, (tb, ta)
        lp0, lp1 = _class_logliks(data, model)
        logits = model.prior_logits(xs, n_users=data.size, standardized=True)
        comp = float(np.sum(gamma * (lp1 + log_expit(logits)) + (1 - gamma) * (lp0 + log_expit(-logits))))
        trace.complete_loglik.append(comp)
    logits = model.prior_logits(xs, n_users=data.size, standardized=True)
    gamma, _ = _posterior(lp0, lp1, logits)
    return model, Responsibilities(gamma), trace


def changed_class_is_consistent(data: _Data, gamma) -> bool:
    """True when the changed-behaviour class carries the larger weighted rate change."""
    z = rate_change(data)
    g = np.asarray(gamma)
    if g.sum() <= 0 or (1 - g).sum() <= 0:
        return True
    return float(g @ z / g.sum()) >= float((1 - g) @ z / (1 - g).sum())


def fit(traces, config: EmConfig | None = None, covariate_mode: bool = False, rng=None):
    """Fit the mixture by EM with restarts.

    Returns ``(model, responsibilities, trace)`` for the restart with the best
    final observed-data log-likelihood, preferring restarts whose
    changed-behaviour class really carries the larger rate change.
    """
    config = config or EmConfig()
    traces = list(traces)
    usable = [t for t in traces if t.has_badge and t.end - t.badge_time > 0]
    if len(usable) < len(traces):
        log.warning("excluded %d users without a usable post-badge window", len(traces) - len(usable))
    if len(usable) < 2:
        raise ValueError("EM needs at least two users with a badge")
    data = _Data(usable)
    x_mean = x_scale = xs = None
    if covariate_mode:
        x = np.vstack([t.covariates for t in usable])
        x_mean, x_scale = _standardization(x)
        xs = (x - x_mean) / x_scale
    gen = as_generator(rng if rng is not None else RngStream(0))
    best = None
    for r in range(max(1, config.restarts)):
        gamma0 = initial_responsibilities(data, gen, jitter=0.0 if r == 0 else 1.0)
        model, resp, trace = _run_em(data, xs, gamma0, config, covariate_mode, x_mean, x_scale)
        key = (changed_class_is_consistent(data, resp.gamma), trace.observed_loglik[-1])
        if best is None or key > best[0]:
            best = (key, model, resp, trace)
    _, model, resp, trace = best
    if not best[0][0]:
        log.warning("no restart put the larger rate change into the changed-behaviour class")
    return model, resp, trace


def predict_new_user(model: PoissonMixtureModel, x) -> float:
    """Prior probability of the changed-behaviour class from covariates alone."""
    if not model.covariate_mode:
        warnings.warn("model was fitted without covariates; returning the global mixing weight",
                      stacklevel=2)
        return float(model.pi)
    xa = augment(model.standardize(x))
    return float(sigmoid(xa @ model.w)[0])


def predict_many(model: PoissonMixtureModel, covariates) -> np.ndarray:
    if not model.covariate_mode:
        warnings.warn("model was fitted without covariates; returning the global mixing weight",
                      stacklevel=2)
        return np.full(len(covariates), float(model.pi))
    return sigmoid(augment(model.standardize(covariates)) @ model.w)


def score_users(model: PoissonMixtureModel, traces) -> np.ndarray:
    """Posterior probability of the changed-behaviour class for traced users."""
    return e_step(traces, model).gamma


__all__ = [
    "EmConfig", "PoissonMixtureModel", "Responsibilities", "EmTrace", "e_step",
    "m_step_mixing", "m_step_mixing_covariates", "m_step_hyper", "fit", "predict_new_user",
    "predict_many", "observed_loglik", "score_users",
]

"""Numerical kernels: special functions, a positivity-constrained maximiser,
squared-error logistic fitting, k-means and seeded samplers."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream: identical (seed, stream_id) gives identical draws.

    ``stream_id`` may be an int or a tuple of ints (hierarchical keys).
    """

    seed: int
    stream_id: int | tuple = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def child(self, *keys: int) -> "RngStream":
        base = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return RngStream(self.seed, base + tuple(int(k) for k in keys))


def stable_key(text: str) -> int:
    """Process-independent 32-bit integer key for an identifier."""
    return int.from_bytes(hashlib.sha256(str(text).encode()).digest()[:4], "little")


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot make a random generator from {type(rng).__name__}")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    tolerance: float = 1e-8
    restarts: int = 3

    def __post_init__(self):
        if self.max_iters < 1 or not self.tolerance > 0 or self.restarts < 0:
            raise ValueError("invalid optimizer configuration")


# -- special functions -------------------------------------------------------

def log_gamma(x: float) -> float:
    if not x > 0:
        raise ValueError(f"log_gamma is defined for x > 0, got {x}")
    return float(special.gammaln(x))


def chi_square_cdf(x: float, df: int) -> float:
    if x < 0:
        raise ValueError(f"chi-square CDF argument must be nonnegative, got {x}")
    if df < 1:
        raise ValueError("degrees of freedom must be positive")
    return float(special.gammainc(df / 2.0, x / 2.0))


def chi_square_sf(x, df: int = 1):
    """Upper tail, accurate far into the tail (vectorised)."""
    return special.gammaincc(df / 2.0, np.asarray(x, dtype=float) / 2.0)


# -- optimisation -------------------------------------------------------------

def maximize_positive(objective, init, config: OptimizerConfig | None = None, gradient=None,
                      log_bounds=(-30.0, 30.0)):
    """Maximise ``objective`` over strictly positive vectors.

    The search runs in log-parameter space. Without ``gradient`` a Nelder-Mead
    simplex is used (restarted from its own best point ``config.restarts``
    times); with an analytic ``gradient`` L-BFGS-B is used instead. The
    returned point never has a lower objective than ``init``.
    """
    config = config or OptimizerConfig()
    init = np.atleast_1d(np.asarray(init, dtype=float))
    if np.any(init <= 0):
        raise ValueError("initial point must be strictly positive")
    f0 = objective(init)
    if not np.isfinite(f0):
        raise ValueError("objective is not finite at the initial point")

    def neg(z):
        val = objective(np.exp(z))
        return -val if np.isfinite(val) else np.inf

    z0 = np.log(init)
    best_z, best_f = z0, -f0
    if gradient is None:
        for _ in range(config.restarts + 1):
            res = optimize.minimize(
                neg, best_z, method="Nelder-Mead",
                options={"maxiter": config.max_iters, "xatol": 1e-10, "fatol": config.tolerance},
            )
            if res.fun < best_f - config.tolerance * max(1.0, abs(best_f)):
                best_z, best_f = res.x, res.fun
            else:
                if res.fun < best_f:
                    best_z, best_f = res.x, res.fun
                break
    else:
        def neg_and_grad(z):
            theta = np.exp(z)
            val = objective(theta)
            if not np.isfinite(val):
                return np.inf, np.zeros_like(z)
            return -val, -np.asarray(gradient(theta)) * theta

        bounds = [log_bounds] * z0.size
        z_start = np.clip(z0, *log_bounds)
        res = optimize.minimize(
            neg_and_grad, z_start, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": config.max_iters, "ftol": config.tolerance * 1e-3, "gtol": 1e-9},
        )
        if np.isfinite(res.fun) and res.fun < best_f:
            best_z, best_f = res.x, res.fun
    if best_f > -f0:
        return init
    return np.exp(best_z)


def sigmoid(z):
    return special.expit(z)


def augment(features) -> np.ndarray:
    """Append the constant-1 bias column."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.hstack([x, np.ones((x.shape[0], 1))])


def logistic_sq_objective(w, xa, targets, l2):
    p = special.expit(xa @ w)
    r = p - targets
    return float(r @ r + l2 * (w @ w))


def fit_logistic(features, targets, l2: float = 1e-4, init=None, max_iters: int = 2000,
                 tolerance: float = 1e-12) -> np.ndarray:
    """Weights (bias last) minimising sum (sigmoid(w.x) - target)^2 + l2 |w|^2.

    Targets may be soft (e.g. EM responsibilities).
    """
    xa = augment(features)
    targets = np.asarray(targets, dtype=float)
    if xa.shape[0] < 1 or targets.shape != (xa.shape[0],):
        raise ValueError("need one target per feature row")
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("targets must lie in [0, 1]")

    def fg(w):
        p = special.expit(xa @ w)
        r = p - targets
        f = r @ r + l2 * (w @ w)
        g = 2.0 * xa.T @ (r * p * (1.0 - p)) + 2.0 * l2 * w
        return f, g

    w0 = np.zeros(xa.shape[1]) if init is None else np.asarray(init, dtype=float)
    res = optimize.minimize(fg, w0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iters, "ftol": tolerance, "gtol": 1e-10})
    w = res.x
    if fg(w)[0] > fg(w0)[0]:
        return w0
    return w


# -- clustering ---------------------------------------------------------------

def _kmeanspp_init(points, k, gen):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[gen.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = gen.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), gen.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _sq_dists(points, centers):
    return np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)


def kmeans_trace(points, k: int, rng, max_iters: int = 300):
    """k-means++ seeded Lloyd iterations; also returns the inertia history."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    gen = as_generator(rng)
    centers = _kmeanspp_init(points, k, gen)
    assignment = np.argmin(_sq_dists(points, centers), axis=1)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers)
        history.append(float(d2[np.arange(n), assignment].sum()))
        for j in range(k):
            members = assignment == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
            else:
                # empty cluster: reseed at the point worst served by its center
                worst = int(np.argmax(d2[np.arange(n), assignment]))
                centers[j] = points[worst]
                assignment[worst] = j
        d2 = _sq_dists(points, centers)
        new_assignment = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_assignment].sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return centers, assignment, history


def kmeans(points, k: int, rng, max_iters: int = 300):
    centers, assignment, _ = kmeans_trace(points, k, rng, max_iters)
    return centers, assignment


# -- samplers ----------------------------------------------------------------

def sample_gamma(shape, rate, rng, size=None):
    if not (np.all(np.asarray(shape) > 0) and np.all(np.asarray(rate) > 0)):
        raise ValueError("gamma shape and rate must be positive")
    return as_generator(rng).gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def _psd_factor(cov):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
            raise
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_mvn(mean, cov, rng, size=None):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    factor = _psd_factor(cov)
    gen = as_generator(rng)
    if size is None:
        return mean + factor @ gen.standard_normal(mean.size)
    z = gen.standard_normal((size, mean.size))
    return mean + z @ factor.T


def sample_wishart(df: int, scale, rng):
    """Bartlett decomposition draw from Wishart(df, scale)."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if df < p:
        raise ValueError("Wishart degrees of freedom must be at least the dimension")
    chol = np.linalg.cholesky(scale)
    gen = as_generator(rng)
    a = np.zeros((p, p))
    for i in range(p):
        a[i, i] = math.sqrt(gen.chisquare(df - i))
        a[i, :i] = gen.standard_normal(i)
    la = chol @ a
    return la @ la.T


def sample_poisson_process(rate_fn, rate_upper_bound: float, window, rng) -> np.ndarray:
    """Thinning: homogeneous candidates at the bound, each kept with
    probability rate_fn(t) / bound. ``rate_fn`` must accept arrays."""
    a, b = map(float, window)
    if b < a:
        raise ValueError("window end precedes its start")
    if rate_upper_bound < 0:
        raise ValueError("rate bound must be nonnegative")
    gen = as_generator(rng)
    if rate_upper_bound == 0 or b == a:
        return np.empty(0)
    m = gen.poisson(rate_upper_bound * (b - a))
    candidates = np.sort(gen.uniform(a, b, size=m))
    rates = np.asarray(rate_fn(candidates), dtype=float) * np.ones(m)
    ratio = rates / rate_upper_bound
    if np.any(ratio > 1.0 + 1e-12) or np.any(ratio < 0):
        raise ValueError("intensity exceeds the thinning bound (or is negative)")
    keep = gen.random(m) < ratio
    return candidates[keep]

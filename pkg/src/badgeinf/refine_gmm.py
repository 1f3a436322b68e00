"""Semi-supervised Gaussian mixture over covariates.

Users come in groups: P (test rejected no-effect), N (not rejected) and X
(no test possible, e.g. users without a badge). Each group has its own
mixing weights with Dirichlet pseudo-counts encoding how far the test's
calls are trusted; component means and covariances are shared. Clusters are
labelled as "influenced" (C1) or not (C0), and a user's influence score is
its posterior mass on C1 clusters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, xlogy

from .mathkit import RngStream, as_generator, augment, fit_logistic, kmeans, sigmoid

log = logging.getLogger(__name__)

GROUPS = ("P", "N", "X")


@dataclass(frozen=True)
class GroupPriorConfig:
    fpr: float = 0.25
    fnr: float = 0.4
    sigma: float = 1.0
    K: int = 4
    swap_denominators: bool = False
    max_iters: int = 300
    tolerance: float = 1e-6
    restarts: int = 3

    def __post_init__(self):
        if not (0 <= self.fpr <= 1 and 0 <= self.fnr <= 1):
            raise ValueError("FPR and FNR must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.K < 2:
            raise ValueError("need at least two clusters")


def init_group_alphas(n_pos: int, n_neg: int, influenced, cfg: GroupPriorConfig) -> dict[str, np.ndarray]:
    """Dirichlet pseudo-counts per group and cluster.

    ``influenced`` is a boolean mask over clusters marking C1. By default the
    P-row denominators both use |C0| and the N-row ones |C1|; with
    ``cfg.swap_denominators`` every entry is divided by the size of its own
    cluster set instead.
    """
    c1 = np.asarray(influenced, dtype=bool)
    k0, k1 = int((~c1).sum()), int(c1.sum())
    if k0 < 1 or k1 < 1:
        raise ValueError("both cluster sets C0 and C1 must be nonempty")
    if n_pos < 0 or n_neg < 0:
        raise ValueError("group sizes must be nonnegative")
    s = cfg.sigma
    if cfg.swap_denominators:
        p_c1_den, n_c0_den = k1, k0
    else:
        p_c1_den, n_c0_den = k0, k1
    alpha_p = np.where(c1, s * n_pos * (1 - cfg.fpr) / p_c1_den, s * n_pos * cfg.fpr / k0)
    alpha_n = np.where(c1, s * n_neg * cfg.fnr / k1, s * n_neg * (1 - cfg.fnr) / n_c0_den)
    return {"P": alpha_p.astype(float), "N": alpha_n.astype(float), "X": np.ones(c1.size)}


@dataclass
class GroupedGmm:
    means: np.ndarray  # K x d, standardized covariate space
    covs: np.ndarray  # K x d x d
    weights: dict[str, np.ndarray]
    alphas: dict[str, np.ndarray]
    influenced: np.ndarray  # K booleans, True for C1
    x_mean: np.ndarray
    x_scale: np.ndarray
    loglik_history: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    def standardize(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.x_mean) / self.x_scale

    def responsibilities(self, covariates, groups) -> np.ndarray:
        xs = self.standardize(covariates)
        log_r, _ = _e_step(xs, _group_index(groups, xs.shape[0]), self.means, self.covs, self.weights)
        return np.exp(log_r)

    def to_dict(self) -> dict:
        return {
            "kind": "grouped_gmm",
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "weights": {g: w.tolist() for g, w in self.weights.items()},
            "alphas": {g: a.tolist() for g, a in self.alphas.items()},
            "influenced": self.influenced.astype(bool).tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupedGmm":
        return cls(
            means=np.asarray(d["means"], dtype=float),
            covs=np.asarray(d["covs"], dtype=float),
            weights={g: np.asarray(w, dtype=float) for g, w in d["weights"].items()},
            alphas={g: np.asarray(a, dtype=float) for g, a in d["alphas"].items()},
            influenced=np.asarray(d["influenced"], dtype=bool),
            x_mean=np.asarray(d["x_mean"], dtype=float),
            x_scale=np.asarray(d["x_scale"], dtype=float),
        )


def _group_index(groups, n) -> np.ndarray:
    if groups is None:
        return np.full(n, GROUPS.index("X"))
    if isinstance(groups, str):
        groups = [groups] * n
    idx = np.array([GROUPS.index(g if g is not None else "X") for g in groups])
    if idx.size != n:
        raise ValueError("one group label per user is required")
    return idx


def _log_gauss(xs, mean, cov):
    d = xs.shape[1]
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (xs - mean).T)
    return -0.5 * np.sum(z * z, axis=0) - np.log(np.diag(chol)).sum() - 0.5 * d * np.log(2 * np.pi)


def _e_step(xs, gidx, means, covs, weights):
    K = means.shape[0]
    log_dens = np.column_stack([_log_gauss(xs, means[c], covs[c]) for c in range(K)])
    with np.errstate(divide="ignore"):
        log_w = np.vstack([np.log(weights[g]) for g in GROUPS])
    joint = log_dens + log_w[gidx]
    norm = logsumexp(joint, axis=1)
    return joint - norm[:, None], float(norm.sum())


def _regularize(cov, ridge_base):
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        eps = ridge_base
        for _ in range(30):
            fixed = cov + eps * np.eye(cov.shape[0])
            try:
                np.linalg.cholesky(fixed)
                log.debug("covariance regularised with ridge %g", eps)
                return fixed
            except np.linalg.LinAlgError:
                eps *= 10
        raise


def _penalty(weights, alphas) -> float:
    return float(sum(np.sum(xlogy(alphas[g], weights[g])) for g in GROUPS))


def _mixing_update(resp, gidx, alphas, K):
    weights = {}
    for i, g in enumerate(GROUPS):
        mass = alphas[g] + resp[gidx == i].sum(axis=0)
        total = mass.sum()
        weights[g] = mass / total if total > 0 else np.full(K, 1.0 / K)
    return weights


def label_clusters(groups, resp) -> np.ndarray:
    """C1 mask: clusters whose weighted P share among P/N members beats the
    global P share. Both sets are kept nonempty."""
    resp = np.asarray(resp, dtype=float)
    g = np.array([x if x is not None else "X" for x in groups])
    p_mass = resp[g == "P"].sum(axis=0)
    n_mass = resp[g == "N"].sum(axis=0)
    n_p, n_n = int((g == "P").sum()), int((g == "N").sum())
    global_share = n_p / (n_p + n_n) if n_p + n_n else 0.0
    tot = p_mass + n_mass
    share = np.divide(p_mass, tot, out=np.full(tot.shape, global_share), where=tot > 0)
    c1 = share > global_share
    if not c1.any():
        c1[int(np.argmax(share))] = True
    if c1.all():
        c1[int(np.argmin(share))] = False
    return c1


def _standardization(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 1e-12, scale, 1.0)


def _init_params(xs, K, gen):
    centers, assignment = kmeans(xs, K, gen)
    var = np.maximum(xs.var(axis=0), 1e-6)
    covs = np.repeat(np.diag(var)[None, :, :], K, axis=0)
    resp = np.zeros((xs.shape[0], K))
    resp[np.arange(xs.shape[0]), assignment] = 1.0
    return centers.copy(), covs, resp


def _run_em(xs, gidx, means, covs, alphas, cfg, ridge_base):
    K = means.shape[0]
    weights = {g: np.full(K, 1.0 / K) for g in GROUPS}
    # mixing weights start from the prior pseudo-counts
    for g in GROUPS:
        tot = alphas[g].sum()
        if tot > 0:
            weights[g] = alphas[g] / tot
    history = []
    prev = None
    for _ in range(cfg.max_iters):
        log_r, data_ll = _e_step(xs, gidx, means, covs, weights)
        pen = data_ll + _penalty(weights, alphas)
        history.append(pen)
        if prev is not None and abs(pen - prev) <= cfg.tolerance * max(1.0, abs(prev)):
            break
        prev = pen
        resp = np.exp(log_r)
        nk = resp.sum(axis=0)
        for c in range(K):
            if nk[c] <= 1e-10:
                continue
            means[c] = resp[:, c] @ xs / nk[c]
            diff = xs - means[c]
            covs[c] = _regularize((resp[:, c, None] * diff).T @ diff / nk[c], ridge_base)
        weights = _mixing_update(resp, gidx, alphas, K)
    return means, covs, weights, history


def fit_semisupervised(covariates, groups, cfg: GroupPriorConfig | None = None, rng=None,
                       initial_means=None) -> GroupedGmm:
    """Grouped-prior EM; the restart with the best penalised likelihood wins."""
    cfg = cfg or GroupPriorConfig()
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < cfg.K:
        raise ValueError(f"need at least K={cfg.K} users, got {n}")
    groups = [g if g is not None else "X" for g in groups]
    gidx = _group_index(groups, n)
    x_mean, x_scale = _standardization(x)
    xs = (x - x_mean) / x_scale
    ridge_base = 1e-6 * float(np.mean(xs.var(axis=0)) or 1.0)
    n_pos, n_neg = groups.count("P"), groups.count("N")
    gen = as_generator(rng if rng is not None else RngStream(0))
    best = None
    for r in range(max(1, cfg.restarts)):
        means, covs, resp0 = _init_params(xs, cfg.K, gen)
        if initial_means is not None and r == 0:
            means = np.array(initial_means, dtype=float)
            resp0 = np.exp(_e_step(xs, np.full(n, 2), means, covs, {g: np.full(cfg.K, 1 / cfg.K) for g in GROUPS})[0])
        influenced = label_clusters(groups, resp0)
        alphas = init_group_alphas(n_pos, n_neg, influenced, cfg)
        means, covs, weights, history = _run_em(xs, gidx, means, covs, alphas, cfg, ridge_base)
        if best is None or history[-1] > best.loglik_history[-1]:
            best = GroupedGmm(means, covs, weights, alphas, influenced, x_mean, x_scale, history)
    return best


def influence_score(gmm: GroupedGmm, covariates, groups=None) -> np.ndarray:
    """Posterior mass on C1 clusters (group X prior for users without a test)."""
    resp = gmm.responsibilities(covariates, groups)
    return np.clip(resp[:, gmm.influenced].sum(axis=1), 0.0, 1.0)


@dataclass
class DownstreamClassifier:
    w: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray

    def predict(self, covariates) -> np.ndarray:
        xs = (np.atleast_2d(np.asarray(covariates, dtype=float)) - self.x_mean) / self.x_scale
        return sigmoid(augment(xs) @ self.w)

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "DownstreamClassifier":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("w", "x_mean", "x_scale")))


def train_downstream_classifier(gmm: GroupedGmm, covariates, groups=None, l2: float = 1e-4,
                                targets=None) -> DownstreamClassifier:
    """Logistic regression on the influence scores of badge holders."""
    if targets is None:
        targets = influence_score(gmm, covariates, groups)
    xs = gmm.standardize(covariates)
    w = fit_logistic(xs, targets, l2=l2)
    return DownstreamClassifier(w, gmm.x_mean, gmm.x_scale)

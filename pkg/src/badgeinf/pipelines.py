"""End-to-end method runners shared by the CLI and the evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nhst, poisson_em, refine_gmm
from .mathkit import RngStream

METHODS = ("poisson_em", "nhst_theoretic", "nhst_bootstrap", "two_phase_theoretic", "two_phase_bootstrap")


@dataclass(frozen=True)
class MethodSettings:
    em: poisson_em.EmConfig = field(default_factory=poisson_em.EmConfig)
    bootstrap: nhst.BootstrapConfig = field(default_factory=nhst.BootstrapConfig)
    gmm: refine_gmm.GroupPriorConfig = field(default_factory=refine_gmm.GroupPriorConfig)
    covariate_mode: bool = True
    coclustering: bool = False  # score new users by joint clustering instead of the downstream classifier
    l2: float = 1e-4


@dataclass
class MethodResult:
    validation: np.ndarray  # scores of traced users, higher = more likely influenced
    prediction: np.ndarray | None  # scores of covariate-only users
    extra: dict = field(default_factory=dict)


@dataclass
class TwoPhaseResult:
    gmm: refine_gmm.GroupedGmm
    groups: list
    scores: np.ndarray
    classifier: refine_gmm.DownstreamClassifier
    new_scores: np.ndarray | None


def run_poisson(traces, new_covariates, settings: MethodSettings, rng) -> MethodResult:
    model, resp, trace = poisson_em.fit(traces, settings.em, settings.covariate_mode, rng)
    pred = None
    if new_covariates is not None and len(new_covariates) and model.covariate_mode:
        pred = poisson_em.predict_many(model, new_covariates)
    return MethodResult(resp.gamma, pred, {"model": model, "trace": trace})


def nhst_scores(outcomes, use_bootstrap: bool) -> np.ndarray:
    """1 - p per user; untestable users score 0."""
    out = []
    for o in outcomes:
        p = o.p_bootstrap if use_bootstrap else o.p_theoretic
        out.append(0.0 if (not o.testable or p is None) else 1.0 - p)
    return np.array(out)


def run_two_phase(traces, outcomes, new_covariates, use_bootstrap: bool, settings: MethodSettings,
                  rng) -> TwoPhaseResult:
    groups = [g if g is not None else "X"
              for g in nhst.classify(outcomes, settings.bootstrap.alpha, use_bootstrap)]
    x = np.vstack([t.covariates for t in traces])
    has_new = new_covariates is not None and len(new_covariates) > 0
    if settings.coclustering and has_new:
        x_all = np.vstack([x, new_covariates])
        gmm = refine_gmm.fit_semisupervised(x_all, groups + ["X"] * len(new_covariates), settings.gmm, rng)
    else:
        gmm = refine_gmm.fit_semisupervised(x, groups, settings.gmm, rng)
    scores = refine_gmm.influence_score(gmm, x, groups)
    clf = refine_gmm.train_downstream_classifier(gmm, x, groups, settings.l2, targets=scores)
    new_scores = None
    if has_new:
        if settings.coclustering:
            new_scores = refine_gmm.influence_score(gmm, new_covariates, "X")
        else:
            new_scores = clf.predict(new_covariates)
    return TwoPhaseResult(gmm, groups, scores, clf, new_scores)


def run_methods(traces, new_covariates, methods, settings: MethodSettings, rng: RngStream,
                threads: int = 1) -> dict[str, MethodResult]:
    """Run the requested methods on one dataset, sharing the test phase."""
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    results: dict[str, MethodResult] = {}
    need_boot = any(m.endswith("bootstrap") for m in methods)
    need_test = any(m != "poisson_em" for m in methods)
    outcomes = None
    if need_test:
        cfg = settings.bootstrap
        outcomes = nhst.evaluate_users(traces, cfg, bootstrap=need_boot, threads=threads)
    for m in methods:
        if m == "poisson_em":
            results[m] = run_poisson(traces, new_covariates, settings, rng.child(1))
        elif m.startswith("nhst_"):
            results[m] = MethodResult(nhst_scores(outcomes, m.endswith("bootstrap")), None)
        else:
            boot = m.endswith("bootstrap")
            tp = run_two_phase(traces, outcomes, new_covariates, boot, settings, rng.child(2 if boot else 3))
            results[m] = MethodResult(tp.scores, tp.new_scores, {"two_phase": tp})
    return results

"""AUC evaluation, repeated synthetic experiments, agreement testing and
KL-based covariate ranking."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from . import pipelines, synthgen
from .mathkit import RngStream
from .nhst import BootstrapConfig

log = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = sstats.rankdata(scores)
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class ExperimentGrid:
    delta_lambda: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)
    delta_x: tuple = (1.0,)
    pi: tuple = (0.5,)
    trend: tuple = (0.0,)
    repeats: int = 20
    n_users: int = 1000
    methods: tuple = pipelines.METHODS
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        for axis in ("delta_lambda", "delta_x", "pi", "trend"):
            if len(getattr(self, axis)) == 0:
                raise ValueError(f"grid axis {axis} is empty")
        bad = set(self.methods) - set(pipelines.METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")

    def cells(self):
        for dl, dx, pi, a in itertools.product(self.delta_lambda, self.delta_x, self.pi, self.trend):
            yield {"delta_lambda": float(dl), "delta_x": float(dx), "pi": float(pi), "trend": float(a)}


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    agreement: list[dict] = field(default_factory=list)
    covariate_rankings: list[dict] = field(default_factory=list)

    def get(self, method: str, metric: str, **cell) -> dict:
        for r in self.rows:
            if r["method"] == method and r["metric"] == metric and all(
                    math.isclose(r[k], v) for k, v in cell.items()):
                return r
        raise KeyError((method, metric, cell))

    def to_dict(self) -> dict:
        return {"rows": self.rows, "failures": self.failures, "agreement": self.agreement,
                "covariate_rankings": self.covariate_rankings}

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        if csv_path is not None:
            cols = ["delta_lambda", "delta_x", "pi", "trend", "method", "metric", "mean", "se", "n"]
            with open(csv_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
                writer.writeheader()
                for r in self.rows:
                    writer.writerow({k: _fmt(r[k]) for k in cols})


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _cell_key(cell) -> tuple:
    return tuple(int(round(cell[k] * 1_000_000)) for k in ("delta_lambda", "delta_x", "pi", "trend"))


def run_repeat(cell: dict, repeat: int, grid: ExperimentGrid, settings: pipelines.MethodSettings) -> dict:
    """One dataset, all requested methods; streams keyed by cell values and repeat."""
    key = _cell_key(cell) + (repeat,)
    seed = int(np.random.SeedSequence(grid.seed, spawn_key=key).generate_state(1)[0])
    ds = synthgen.generate_dataset(synthgen.SyntheticConfig(
        n_users=grid.n_users, pi=cell["pi"], delta_lambda=cell["delta_lambda"],
        delta_x=cell["delta_x"], trend=cell["trend"], seed=seed))
    settings = dataclasses.replace(settings, bootstrap=dataclasses.replace(settings.bootstrap, seed=seed))
    traces = ds.traced_users
    y_val = np.array([t.truth for t in traces])
    new_x = np.vstack([u.covariates for u in ds.feature_only_users])
    y_new = np.array([u.truth for u in ds.feature_only_users])
    out = {"metrics": {}, "failures": [], "calls": {}}
    try:
        results = pipelines.run_methods(traces, new_x, grid.methods, settings, RngStream(seed, 7))
    except Exception as exc:  # noqa: BLE001 - recorded per repeat, run continues
        out["failures"].append({"repeat": repeat, "method": "*", "error": repr(exc)})
        return out
    for m, res in results.items():
        for metric, scores, y in (("validation_auc", res.validation, y_val),
                                  ("prediction_auc", res.prediction, y_new)):
            if scores is None:
                continue
            try:
                out["metrics"][(m, metric)] = auc(scores, y)
            except ValueError as exc:
                out["failures"].append({"repeat": repeat, "method": m, "metric": metric, "error": str(exc)})
        out["calls"][m] = (np.asarray(res.validation) > 0.5).astype(int)
    return out


def _job(args):
    cell, repeat, grid, settings = args
    return run_repeat(cell, repeat, grid, settings)


def run_grid(grid: ExperimentGrid, settings: pipelines.MethodSettings | None = None,
             threads: int = 1) -> EvalReport:
    settings = settings or pipelines.MethodSettings()
    cells = list(grid.cells())
    jobs = [(c, r, grid, settings) for c in cells for r in range(grid.repeats)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(_job, jobs))
    else:
        outs = [_job(j) for j in jobs]
    report = EvalReport()
    for ci, cell in enumerate(cells):
        chunk = outs[ci * grid.repeats:(ci + 1) * grid.repeats]
        for m in grid.methods:
            for metric in ("validation_auc", "prediction_auc"):
                vals = [o["metrics"][(m, metric)] for o in chunk if (m, metric) in o["metrics"]]
                if not vals:
                    continue
                vals = np.array(vals)
                se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
                report.rows.append({**cell, "method": m, "metric": metric, "mean": float(vals.mean()),
                                    "se": se, "n": int(vals.size), "values": vals.tolist()})
        for o in chunk:
            report.failures.extend({**cell, **f} for f in o["failures"])
        if "poisson_em" in grid.methods and "two_phase_bootstrap" in grid.methods:
            fracs = [float(np.mean(o["calls"]["poisson_em"] == o["calls"]["two_phase_bootstrap"]))
                     for o in chunk if "poisson_em" in o["calls"] and "two_phase_bootstrap" in o["calls"]]
            if fracs:
                report.agreement.append({**cell, "pair": "poisson_em~two_phase_bootstrap",
                                         "mean_agreement": float(np.mean(fracs))})
    return report


def agreement_test(calls_a, calls_b) -> tuple[float, float]:
    """Agreement fraction and one-sided exact binomial p-value against chance (1/2)."""
    a = np.asarray(calls_a).astype(int)
    b = np.asarray(calls_b).astype(int)
    if a.shape != b.shape:
        raise ValueError("call vectors must have equal length")
    n = a.size
    if n < 1:
        raise ValueError("need at least one call")
    k = int(np.sum(a == b))
    return k / n, float(sstats.binom.sf(k - 1, n, 0.5))


def _sym_kl(m0, v0, m1, v1) -> float:
    kl01 = 0.5 * (math.log(v1 / v0) + (v0 + (m0 - m1) ** 2) / v1 - 1.0)
    kl10 = 0.5 * (math.log(v0 / v1) + (v1 + (m0 - m1) ** 2) / v0 - 1.0)
    return 0.5 * (kl01 + kl10)


def kl_rank_covariates(covariates, scores, threshold: float = 0.5, names=None) -> list[dict]:
    """Rank covariates by symmetrised KL between per-class univariate Gaussians."""
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cls = np.asarray(scores, dtype=float) > threshold
    if cls.all() or not cls.any():
        raise ValueError("both classes must be nonempty after thresholding")
    names = list(names) if names is not None else [f"x{j}" for j in range(x.shape[1])]
    ranking = []
    for j, name in enumerate(names):
        a, b = x[~cls, j], x[cls, j]
        v0, v1 = a.var(), b.var()
        if v0 < 1e-12 or v1 < 1e-12:
            warnings.warn(f"covariate {name!r} has (near) zero variance in a class; flooring at 1e-12",
                          stacklevel=2)
            v0, v1 = max(v0, 1e-12), max(v1, 1e-12)
        ranking.append({"covariate": name, "kl": _sym_kl(a.mean(), v0, b.mean(), v1),
                        "mean0": float(a.mean()), "mean1": float(b.mean())})
    ranking.sort(key=lambda r: -r["kl"])
    return ranking


def default_settings(seed: int = 0) -> pipelines.MethodSettings:
    return pipelines.MethodSettings(bootstrap=BootstrapConfig(seed=seed))

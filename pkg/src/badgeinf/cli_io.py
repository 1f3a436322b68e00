"""File formats, preprocessing and run configuration.

User table: ``user_id,start,end,badge_time,<covariates...>`` (empty badge_time
means the badge was never received; without the column the badge time is
derived from the threshold-th event). Event log: ``user_id,timestamp``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError

from .mathkit import kmeans
from .model_core import BadgeSpec, TraceValidationError, UserTrace

log = logging.getLogger(__name__)

BAD_ROW_LIMIT = 0.01
USER_COLUMNS = ("user_id", "start", "end", "badge_time")


class InputError(ValueError):
    """Unusable input file or configuration (CLI exit status 1)."""


# -- configuration -------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BadgeSection(_Strict):
    introduction_time: float = 0.0
    action_type: str = "action"
    threshold: int = Field(1, ge=1)


class NhstSection(_Strict):
    alpha: float = Field(0.05, gt=0, lt=1)
    B: int = Field(200, ge=1)
    margin: float | None = Field(None, ge=0)
    smoothed: bool = False
    method: str = Field("both", pattern="^(theoretic|bootstrap|both)$")


class PoissonSection(_Strict):
    covariate_mode: bool = True
    max_iters: int = Field(200, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    restarts: int = Field(3, ge=1)
    l2: float = Field(1e-4, ge=0)


class RefineSection(_Strict):
    K: int = Field(4, ge=2)
    fpr: float = Field(0.25, ge=0, le=1)
    fnr: float = Field(0.4, ge=0, le=1)
    sigma: float = Field(1.0, ge=0)
    swap_denominators: bool = False
    max_iters: int = Field(300, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    restarts: int = Field(3, ge=1)
    variant: str = Field("bootstrap", pattern="^(theoretic|bootstrap)$")
    coclustering: bool = False


class SyntheticSection(_Strict):
    n_users: int = Field(1000, ge=2)
    pi: float = Field(0.5, ge=0, le=1)
    delta_lambda: float = Field(1.0, ge=0, lt=10)
    delta_x: float = Field(1.0, ge=0)
    trend: float = Field(0.0, ge=0)


class GridSection(_Strict):
    delta_lambda: list[float] = [0.0, 0.5, 1.0, 2.0, 4.0]
    delta_x: list[float] = [1.0]
    pi: list[float] = [0.5]
    trend: list[float] = [0.0]
    repeats: int = Field(20, ge=1)
    n_users: int = Field(1000, ge=2)
    methods: list[str] = ["poisson_em", "nhst_theoretic", "nhst_bootstrap",
                          "two_phase_theoretic", "two_phase_bootstrap"]


class RunConfig(_Strict):
    seed: int = 0
    threads: int = Field(1, ge=1)
    badge: BadgeSection = BadgeSection()
    nhst: NhstSection = NhstSection()
    poisson: PoissonSection = PoissonSection()
    refine: RefineSection = RefineSection()
    synthetic: SyntheticSection = SyntheticSection()
    grid: GridSection = GridSection()

    def badge_spec(self) -> BadgeSpec:
        return BadgeSpec(self.badge.introduction_time, self.badge.action_type, self.badge.threshold)


def load_config(path=None, **overrides) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except PydanticValidationError as exc:
        raise InputError(f"invalid config: {exc}") from exc


# -- readers -------------------------------------------------------------------

def _parse_float(text):
    text = (text or "").strip()
    if text == "":
        return None
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite number {text!r}")
    return value


def _check_bad_rows(bad: int, total: int, what: str):
    if total and bad / total > BAD_ROW_LIMIT:
        raise InputError(f"{what}: {bad} of {total} rows unparseable (limit {BAD_ROW_LIMIT:.0%})")


def read_event_log(path) -> dict[str, np.ndarray]:
    events = defaultdict(list)
    bad = total = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"user_id", "timestamp"} <= set(reader.fieldnames):
            raise InputError(f"{path}: event log needs columns user_id,timestamp")
        for lineno, row in enumerate(reader, start=2):
            total += 1
            try:
                t = _parse_float(row["timestamp"])
                if t is None or not row["user_id"]:
                    raise ValueError("missing value")
            except (ValueError, TypeError) as exc:
                bad += 1
                log.warning("%s:%d: skipped event row (%s)", path, lineno, exc)
                continue
            events[row["user_id"]].append(t)
    _check_bad_rows(bad, total, str(path))
    return {u: np.sort(np.asarray(ts, dtype=float)) for u, ts in events.items()}


def load_users(user_table, event_log, badge: BadgeSpec | None = None,
               diagnostics: dict | None = None) -> list[UserTrace]:
    """Join the user table with the event log into validated traces.

    Users with missing covariates or inconsistent windows are dropped and
    counted in ``diagnostics``. Events outside a user's window are ignored.
    """
    diag = diagnostics if diagnostics is not None else {}
    diag.update({"rows": 0, "bad_rows": 0, "dropped_missing_covariates": 0,
                 "dropped_invalid_window": 0, "loaded": 0})
    events = read_event_log(event_log) if event_log is not None else {}
    traces = []
    with open(user_table, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if not {"user_id", "start", "end"} <= set(cols):
            raise InputError(f"{user_table}: user table needs columns user_id,start,end")
        has_badge_col = "badge_time" in cols
        cov_cols = [c for c in cols if c not in USER_COLUMNS]
        if not has_badge_col and badge is None:
            raise InputError("no badge_time column: a badge threshold is needed to derive badge times")
        diag["covariate_columns"] = cov_cols
        for lineno, row in enumerate(reader, start=2):
            diag["rows"] += 1
            uid = row["user_id"]
            try:
                start, end = _parse_float(row["start"]), _parse_float(row["end"])
                if start is None or end is None or not uid:
                    raise ValueError("missing id or window")
                raw_cov = [_parse_float(row[c]) for c in cov_cols]
                b = _parse_float(row["badge_time"]) if has_badge_col else None
            except (ValueError, TypeError) as exc:
                diag["bad_rows"] += 1
                log.warning("%s:%d: skipped user row (%s)", user_table, lineno, exc)
                continue
            if any(v is None for v in raw_cov):
                diag["dropped_missing_covariates"] += 1
                log.warning("user %s dropped: incomplete covariates", uid)
                continue
            all_events = events.get(uid, np.empty(0))
            if not has_badge_col and all_events.size >= badge.threshold:
                b = float(all_events[badge.threshold - 1])
            in_window = all_events[(all_events >= start) & (all_events <= end)]
            try:
                traces.append(UserTrace(uid, start, end, b, in_window, np.array(raw_cov, dtype=float)))
            except TraceValidationError as exc:
                diag["dropped_invalid_window"] += 1
                log.warning("user %s dropped: %s", uid, exc)
    _check_bad_rows(diag["bad_rows"], diag["rows"], str(user_table))
    diag["loaded"] = len(traces)
    return traces


def read_covariate_table(path) -> tuple[list[str], np.ndarray, list[str]]:
    """``user_id,<covariates...>``; returns ids, matrix and column names."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in (reader.fieldnames or []) if c != "user_id"]
        if "user_id" not in (reader.fieldnames or []):
            raise InputError(f"{path}: needs a user_id column")
        ids, rows = [], []
        for row in reader:
            try:
                vals = [_parse_float(row[c]) for c in cols]
            except ValueError:
                vals = [None]
            if any(v is None for v in vals):
                log.warning("user %s skipped: incomplete covariates", row["user_id"])
                continue
            ids.append(row["user_id"])
            rows.append(vals)
    return ids, np.array(rows, dtype=float).reshape(len(rows), len(cols)), cols


# -- writers -------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_rows(path, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_cell(r.get(c)) for c in columns])


def write_user_table(path, traces, cov_names=None):
    d = len(traces[0].covariates) if traces else 0
    cov_names = cov_names or [f"x{j}" for j in range(d)]
    rows = []
    for t in traces:
        r = {"user_id": t.user_id, "start": t.start, "end": t.end, "badge_time": t.badge_time}
        r.update(zip(cov_names, t.covariates.tolist()))
        rows.append(r)
    write_rows(path, rows, list(USER_COLUMNS) + cov_names)


def write_event_log(path, traces):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "timestamp"])
        for t in traces:
            for ts in t.events:
                writer.writerow([t.user_id, repr(float(ts))])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- preprocessing -------------------------------------------------------------

def transform_counts(values) -> np.ndarray:
    """Elementwise log(x + 1) for nonnegative count columns."""
    x = np.asarray(values, dtype=float)
    if np.any(x < 0):
        raise ValueError("count columns must be nonnegative")
    return np.log1p(x)


def embed_distance_features(embeddings, k: int = 5, rng=None) -> np.ndarray:
    """Distances from each embedding row to each of k k-means centers."""
    emb = np.asarray(embeddings, dtype=float)
    if emb.ndim == 1:
        emb = emb[:, None]
    if k < 1:
        raise ValueError("k must be positive")
    if emb.shape[0] < k:
        raise ValueError(f"need at least k={k} rows, got {emb.shape[0]}")
    centers, _ = kmeans(emb, k, rng if rng is not None else 0)
    return np.sqrt(np.sum((emb[:, None, :] - centers[None, :, :]) ** 2, axis=2))

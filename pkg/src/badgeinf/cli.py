"""Command-line entry point: ``badgeinf <subcommand> [--config] [--seed] [--out] [--threads]``.

Exit status 0 on success, 1 on invalid input or configuration, 2 on a runtime
failure. Diagnostics are written to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, cli_io, evalharness, nhst, pipelines, poisson_em, refine_gmm, synthgen
from .mathkit import RngStream
from .model_core import TraceValidationError

log = logging.getLogger("badgeinf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        extra = getattr(record, "data", None)
        if extra:
            entry.update(extra)
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True, default=str)


def _setup_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.captureWarnings(True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"level": "error", "message": message}) + "\n")
        sys.exit(EXIT_INVALID)


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", type=Path, help="RunConfig JSON", **({"default": None} if defaults else d))
    p.add_argument("--seed", type=int, help="overrides the config seed", **({"default": None} if defaults else d))
    p.add_argument("--out", type=Path, help="output directory", **({"default": Path(".")} if defaults else d))
    p.add_argument("--threads", type=int, help="worker processes", **({"default": None} if defaults else d))
    p.add_argument("-v", "--verbose", action="store_true", **({"default": False} if defaults else d))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="badgeinf", parents=[_global_flags(True)],
                     description="Per-user badge influence inference.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    flags = _global_flags(False)

    def add(name, help_):
        return sub.add_parser(name, parents=[flags], help=help_)

    add("synth", "generate a synthetic dataset")

    p = add("fit-poisson", "fit the Poisson-process mixture")
    _data_args(p)
    p.add_argument("--new-users", type=Path, help="covariate-only users to score")

    p = add("test", "per-user rate-change tests")
    _data_args(p)

    p = add("refine", "two-phase covariate clustering")
    _data_args(p)
    p.add_argument("--tests", type=Path, help="output of `test` (recomputed if absent)")
    p.add_argument("--new-users", type=Path)

    p = add("predict", "score covariate-only users with a fitted model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--new-users", type=Path, required=True)

    add("evaluate", "run the synthetic experiment grid")

    p = add("report", "merge per-user CSV outputs on user_id")
    p.add_argument("inputs", nargs="+", type=Path)
    return parser


def _data_args(p):
    p.add_argument("--users", type=Path, required=True, help="user table CSV")
    p.add_argument("--events", type=Path, required=True, help="event log CSV")


# -- settings ------------------------------------------------------------------

def method_settings(cfg: cli_io.RunConfig) -> pipelines.MethodSettings:
    return pipelines.MethodSettings(
        em=poisson_em.EmConfig(max_iters=cfg.poisson.max_iters, tolerance=cfg.poisson.tolerance,
                               restarts=cfg.poisson.restarts, l2=cfg.poisson.l2),
        bootstrap=nhst.BootstrapConfig(B=cfg.nhst.B, margin=cfg.nhst.margin, alpha=cfg.nhst.alpha,
                                       seed=cfg.seed, smoothed=cfg.nhst.smoothed),
        gmm=refine_gmm.GroupPriorConfig(
            fpr=cfg.refine.fpr, fnr=cfg.refine.fnr, sigma=cfg.refine.sigma, K=cfg.refine.K,
            swap_denominators=cfg.refine.swap_denominators, max_iters=cfg.refine.max_iters,
            tolerance=cfg.refine.tolerance, restarts=cfg.refine.restarts),
        covariate_mode=cfg.poisson.covariate_mode,
        coclustering=cfg.refine.coclustering,
        l2=cfg.poisson.l2,
    )


def _load(args, cfg):
    diag = {}
    traces = cli_io.load_users(args.users, args.events, cfg.badge_spec(), diag)
    log.info("loaded users", extra={"data": diag})
    if not traces:
        raise cli_io.InputError("no usable users after validation")
    return traces, diag.get("covariate_columns")


def _new_users(path):
    if path is None:
        return [], None
    ids, x, _ = cli_io.read_covariate_table(path)
    return ids, x


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    s = cfg.synthetic
    ds = synthgen.generate_dataset(synthgen.SyntheticConfig(
        n_users=s.n_users, pi=s.pi, delta_lambda=s.delta_lambda, delta_x=s.delta_x,
        trend=s.trend, seed=cfg.seed))
    out = args.out
    cov_names = [f"x{j}" for j in range(ds.sigma.shape[0])]
    cli_io.write_user_table(out / "users.csv", ds.traced_users, cov_names)
    cli_io.write_event_log(out / "events.csv", ds.traced_users)
    cli_io.write_rows(out / "new_users.csv",
                      [{"user_id": u.user_id, **dict(zip(cov_names, u.covariates.tolist()))}
                       for u in ds.feature_only_users], ["user_id"] + cov_names)
    truth = [{"user_id": t.user_id, "truth": t.truth, "kind": "traced"} for t in ds.traced_users]
    truth += [{"user_id": u.user_id, "truth": u.truth, "kind": "feature_only"} for u in ds.feature_only_users]
    cli_io.write_rows(out / "truth.csv", truth, ["user_id", "truth", "kind"])
    cli_io.write_json(out / "metadata.json", {"seed": cfg.seed, "run_config": cfg.model_dump(exclude={"threads"}), **ds.metadata()})
    log.info("wrote synthetic dataset", extra={"data": {"traced": len(ds.traced_users),
                                                         "feature_only": len(ds.feature_only_users)}})


def cmd_fit_poisson(args, cfg):
    traces, _ = _load(args, cfg)
    settings = method_settings(cfg)
    model, resp, trace = poisson_em.fit(traces, settings.em, settings.covariate_mode, RngStream(cfg.seed, 1))
    usable = [t for t in traces if t.has_badge and t.end - t.badge_time > 0]
    cli_io.write_json(args.out / "poisson_model.json", {"kind": "poisson_mixture", "model": model.to_dict()})
    cli_io.write_json(args.out / "poisson_trace.json", trace.summary())
    cli_io.write_rows(args.out / "poisson_users.csv",
                      [{"user_id": t.user_id, "posterior": float(g)} for t, g in zip(usable, resp.gamma)],
                      ["user_id", "posterior"])
    ids, x = _new_users(args.new_users)
    if ids:
        _write_predictions(args.out / "poisson_predictions.csv", ids, poisson_em.predict_many(model, x))
    log.info("fitted poisson mixture", extra={"data": trace.summary()})


TEST_COLUMNS = ["user_id", "llr", "stat", "p_theoretic", "p_bootstrap", "group", "testable", "note"]


def _run_tests(traces, cfg, threads):
    settings = method_settings(cfg)
    bootstrap = cfg.nhst.method != "theoretic"
    return nhst.evaluate_users(traces, settings.bootstrap, bootstrap=bootstrap, threads=threads)


def cmd_test(args, cfg):
    traces, _ = _load(args, cfg)
    outcomes = _run_tests(traces, cfg, cfg.threads)
    rows = [{**o.row(), "testable": int(o.testable), "note": o.note} for o in outcomes]
    cli_io.write_rows(args.out / "tests.csv", rows, TEST_COLUMNS)
    log.info("tested users", extra={"data": {"users": len(rows),
                                             "untestable": sum(not o.testable for o in outcomes)}})


def _float_or_none(text):
    return None if text in ("", None) else float(text)


def _float_or_nan(text):
    v = _float_or_none(text)
    return math.nan if v is None else v


def read_tests(path, traces) -> list[nhst.TestOutcome]:
    with open(path, newline="") as fh:
        rows = {r["user_id"]: r for r in csv.DictReader(fh)}
    out = []
    for t in traces:
        r = rows.get(t.user_id)
        if r is None:
            out.append(nhst.TestOutcome(t.user_id, math.nan, math.nan, math.nan, None, None, False, "not tested"))
            continue
        testable = r.get("testable", "1") == "1"
        grp = r.get("group") or None
        out.append(nhst.TestOutcome(
            t.user_id, _float_or_nan(r["llr"]), _float_or_nan(r["stat"]),
            _float_or_nan(r["p_theoretic"]), _float_or_none(r["p_bootstrap"]),
            grp if testable else None, testable, r.get("note", "")))
    return out


def cmd_refine(args, cfg):
    traces, cov_names = _load(args, cfg)
    use_boot = cfg.refine.variant == "bootstrap"
    if args.tests is not None:
        outcomes = read_tests(args.tests, traces)
    else:
        settings = method_settings(cfg)
        outcomes = nhst.evaluate_users(traces, settings.bootstrap, bootstrap=use_boot, threads=cfg.threads)
    ids, x_new = _new_users(args.new_users)
    tp = pipelines.run_two_phase(traces, outcomes, x_new if ids else None, use_boot, method_settings(cfg),
                                 RngStream(cfg.seed, 2 if use_boot else 3))
    cli_io.write_json(args.out / "gmm_model.json", {"kind": "grouped_gmm", "model": tp.gmm.to_dict()})
    cli_io.write_json(args.out / "classifier.json", {"kind": "downstream_classifier",
                                                     "model": tp.classifier.to_dict()})
    cli_io.write_rows(args.out / "refine_users.csv",
                      [{"user_id": t.user_id, "group": g, "influence": float(s)}
                       for t, g, s in zip(traces, tp.groups, tp.scores)],
                      ["user_id", "group", "influence"])
    if ids:
        _write_predictions(args.out / "refine_predictions.csv", ids, tp.new_scores)
    x = np.vstack([t.covariates for t in traces])
    try:
        ranking = evalharness.kl_rank_covariates(x, tp.scores, names=cov_names)
        cli_io.write_json(args.out / "covariate_ranking.json", ranking)
    except ValueError as exc:
        log.warning("covariate ranking skipped: %s", exc)


def _write_predictions(path, ids, scores):
    cli_io.write_rows(path, [{"user_id": u, "score": float(s)} for u, s in zip(ids, scores)],
                      ["user_id", "score"])


def cmd_predict(args, cfg):
    try:
        doc = json.loads(args.model.read_text())
        kind, body = doc["kind"], doc["model"]
    except (OSError, ValueError, KeyError) as exc:
        raise cli_io.InputError(f"cannot read model {args.model}: {exc}") from exc
    ids, x = _new_users(args.new_users)
    if not ids:
        raise cli_io.InputError("no users to score")
    if kind == "poisson_mixture":
        scores = poisson_em.predict_many(poisson_em.PoissonMixtureModel.from_dict(body), x)
    elif kind == "downstream_classifier":
        scores = refine_gmm.DownstreamClassifier.from_dict(body).predict(x)
    elif kind == "grouped_gmm":
        scores = refine_gmm.influence_score(refine_gmm.GroupedGmm.from_dict(body), x, "X")
    else:
        raise cli_io.InputError(f"unknown model kind {kind!r}")
    _write_predictions(args.out / "predictions.csv", ids, scores)


def cmd_evaluate(args, cfg):
    g = cfg.grid
    grid = evalharness.ExperimentGrid(tuple(g.delta_lambda), tuple(g.delta_x), tuple(g.pi), tuple(g.trend),
                                      g.repeats, g.n_users, tuple(g.methods), cfg.seed)
    t0 = time.perf_counter()
    report = evalharness.run_grid(grid, method_settings(cfg), threads=cfg.threads)
    report.write(args.out / "report.json", args.out / "report.csv")
    log.info("grid finished", extra={"data": {"cells": len(list(grid.cells())), "repeats": g.repeats,
                                              "failures": len(report.failures),
                                              "seconds": round(time.perf_counter() - t0, 2)}})


def cmd_report(args, cfg):
    merged: dict[str, dict] = {}
    columns = ["user_id"]
    for path in args.inputs:
        try:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if "user_id" not in (reader.fieldnames or []):
                    raise cli_io.InputError(f"{path}: no user_id column")
                prefix = path.stem
                cols = [c for c in reader.fieldnames if c != "user_id"]
                columns += [f"{prefix}.{c}" for c in cols]
                for r in reader:
                    row = merged.setdefault(r["user_id"], {"user_id": r["user_id"]})
                    row.update({f"{prefix}.{c}": r[c] for c in cols})
        except OSError as exc:
            raise cli_io.InputError(f"cannot read {path}: {exc}") from exc
    rows = [merged[k] for k in sorted(merged)]
    cli_io.write_rows(args.out / "report.csv", rows, columns)
    cli_io.write_json(args.out / "report.json", {"columns": columns, "rows": rows})


COMMANDS = {
    "synth": cmd_synth, "fit-poisson": cmd_fit_poisson, "test": cmd_test, "refine": cmd_refine,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = cli_io.load_config(args.config, seed=args.seed, threads=args.threads)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (cli_io.InputError, TraceValidationError, ValueError) as exc:
        log.error("invalid input: %s", exc, extra={"data": {"command": args.command}})
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime-failure status
        log.error("runtime failure: %s", exc, exc_info=True, extra={"data": {"command": args.command}})
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``xaiews <subcommand> ...``.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""
import argparse
import csv
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import baselines, evaluation, explain, svg, tcn
from .core import make_rng
from .ehr import (HORIZONS, N_FEATURES, PARAMETER_NAMES, PARAMETERS, FeatureScaler,
                  prepare_grid, read_events, write_events)
from .labels import ILLNESSES, label_admission, read_labels, write_labels
from .synth import CohortSpec, generate_cohort

GBM_MAGIC = "xaiews-gbvital"


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


# ---------------------------------------------------------------------------
# Config helpers
# ---------------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError("missing_file", f"config file not found: {path}")
    with open(path) as fh:
        cfg = json.load(fh)
    if cfg.get("version", 1) != 1:
        raise CliError("schema_version", f"{path}: unsupported config version {cfg.get('version')}")
    return cfg


def tcn_config(cfg, seed):
    known = {f.name for f in fields(tcn.TcnConfig)}
    user = cfg.get("tcn", {})
    bad = set(user) - known
    if bad:
        raise CliError("config", f"unknown tcn settings {sorted(bad)}")
    c = tcn.TcnConfig(**{**user, "seed": seed})
    try:
        c.validate()
    except tcn.ConfigError as e:
        raise CliError("config", str(e)) from e
    return c


def eval_settings(cfg, args):
    e = cfg.get("evaluation", {})
    folds = args.folds if getattr(args, "folds", None) else e.get("folds", list(range(evaluation.N_FOLDS)))
    ratio = getattr(args, "train_negative_ratio", None)
    if ratio is None:
        ratio = e.get("train_negative_ratio")
    warm = bool(getattr(args, "warm_start", False) or e.get("warm_start", False))
    return evaluation.EvalSettings(seed=args.seed, folds=tuple(folds), train_negative_ratio=ratio,
                                   tcn_config=tcn_config(cfg, args.seed), threads=args.threads, warm_start=warm)


def _need(path):
    if not os.path.exists(path):
        raise CliError("missing_file", f"file not found: {path}")
    return path


def _events(path):
    return read_events(_need(path))


def _labels_for(admissions, path):
    by_id = read_labels(_need(path))
    missing = [a.admission_id for a in admissions if a.admission_id not in by_id]
    if missing:
        raise CliError("labels", f"{len(missing)} admissions have no labels (first: {missing[0]})")
    return [by_id[a.admission_id] for a in admissions]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg):
    overrides = {"seed": args.seed}
    if args.n_admissions is not None:
        overrides["n_admissions"] = args.n_admissions
    if args.spec is not None:
        _need(args.spec)
    try:
        spec = CohortSpec.load(args.spec, **overrides)
    except (ValueError, KeyError) as e:
        raise CliError("spec", str(e)) from e
    admissions = generate_cohort(spec)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_events(admissions, fh)


def cmd_label(args, cfg):
    admissions = _events(args.events)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_labels(admissions, [label_admission(a) for a in admissions], fh)


def _train_split(admissions, labels, illness, seed):
    """Validation on decile 0, training on the other nine."""
    deciles = evaluation.patient_deciles(admissions, labels, illness, seed)
    d = np.array([deciles[a.patient_id] for a in admissions])
    return np.nonzero(d != 0)[0], np.nonzero(d == 0)[0]


def cmd_train(args, cfg):
    admissions = _events(args.events)
    labels = _labels_for(admissions, args.labels)
    settings = eval_settings(cfg, args)
    tr, va = _train_split(admissions, labels, args.illness, args.seed)
    neg_ends = evaluation.negative_window_ends(admissions, args.seed)
    train_ws = evaluation.window_set(admissions, labels, args.illness, args.horizon, tr, neg_ends)
    train_ws = evaluation.subsample_negatives(train_ws, settings.train_negative_ratio,
                                              make_rng([args.seed, 0x55, 0]))
    val_ws = evaluation.window_set(admissions, labels, args.illness, args.horizon, va, neg_ends)
    ctx = evaluation.FitContext(admissions, labels, args.illness, args.horizon, train_ws, val_ws,
                                args.seed, settings.tcn_config)
    meta = {"illness": args.illness, "horizon": args.horizon, "model": args.model, "seed": args.seed}
    if args.model == "tcn":
        net, scaler = evaluation.fit_tcn(ctx)
        tcn.save_checkpoint(net, args.out, {**meta, "scaler": scaler.to_dict()})
    else:
        gbm, medians = evaluation.fit_gbvital(ctx)
        with open(args.out, "w") as fh:
            json.dump({"format": GBM_MAGIC, "version": 1, **meta, "medians": medians,
                       "model": gbm.to_dict()}, fh, sort_keys=True)


def load_model(path):
    """('tcn', (net, scaler), meta) or ('gbvital', (gbm, medians), meta)."""
    _need(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == tcn.MAGIC:
        try:
            net, extra = tcn.load_checkpoint(path)
        except ValueError as e:
            raise CliError("schema_version", str(e)) from e
        return "tcn", (net, FeatureScaler.from_dict(extra["scaler"])), extra
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CliError("checkpoint", f"{path}: unrecognised checkpoint") from e
    if d.get("format") != GBM_MAGIC or d.get("version") != 1:
        raise CliError("schema_version", f"{path}: unsupported checkpoint format")
    return "gbvital", (baselines.GbmModel.from_dict(d["model"]), d["medians"]), d


def _parse_at(spec):
    try:
        aid, t = spec.rsplit(",", 1)
        return aid, float(t)
    except ValueError as e:
        raise CliError("usage", f"--at expects <admission_id,end_time>, got {spec!r}") from e


def _by_id(admissions, aid):
    for a in admissions:
        if a.admission_id == aid:
            return a
    raise CliError("unknown_admission", f"admission {aid} not in events file")


def cmd_predict(args, cfg):
    kind, model, _ = load_model(args.checkpoint)
    admissions = _events(args.events)
    queries = [_parse_at(s) for s in args.at]
    rows = []
    for aid, end in queries:
        adm = _by_id(admissions, aid)
        if kind == "tcn":
            net, scaler = model
            risk = float(tcn.predict_risk(net, prepare_grid(adm, end, scaler)[0].values[None])[0])
        else:
            gbm, medians = model
            risk = float(gbm.predict(baselines.build_gbvital_features(adm, end, medians)[None])[0])
        rows.append((aid, end, risk))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "end_time", "risk"])
        for aid, end, risk in rows:
            w.writerow([aid, repr(end), f"{risk:.12f}"])


RELEVANCE_COLUMNS = ["admission_id", "end_time", "hour", "parameter", "value", "observed", "relevance"]


def _explain_targets(args, admissions):
    targets = []
    for spec in args.admission or []:
        if "," in spec:
            aid, end = _parse_at(spec)
            targets.append((_by_id(admissions, aid), end))
        else:
            adm = _by_id(admissions, spec)
            targets.append((adm, float(adm.length_of_stay)))
    if args.labels:
        if not args.illness:
            raise CliError("usage", "--labels needs --illness")
        labels = _labels_for(admissions, args.labels)
        for adm, lab in zip(admissions, labels):
            r = lab[args.illness]
            if r.positive and r.onset_time - args.horizon >= 1.0:
                targets.append((adm, r.onset_time - args.horizon))
    if not targets:
        raise CliError("usage", "nothing to explain: give --admission or --labels/--illness")
    return targets


def cmd_explain(args, cfg):
    kind, model, _ = load_model(args.checkpoint)
    if kind != "tcn":
        raise CliError("usage", "explain needs a tcn checkpoint")
    net, scaler = model
    admissions = _events(args.events)
    os.makedirs(args.out_dir, exist_ok=True)
    for adm, end in _explain_targets(args, admissions):
        scaled, raw = prepare_grid(adm, end, scaler)
        rmap = explain.explain(net, scaled)
        stem = os.path.join(args.out_dir, adm.admission_id)
        with open(stem + "_relevance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RELEVANCE_COLUMNS)
            for t in range(raw.values.shape[0]):
                for p in range(N_FEATURES):
                    w.writerow([adm.admission_id, repr(float(end)), t, PARAMETERS[p], f"{raw.values[t, p]:.10g}",
                                int(raw.mask[t, p]), f"{rmap.values[t, p]:.10e}"])
        top = explain.top_k(rmap, 10)
        with open(stem + "_top10.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "parameter", "mean_relevance"])
            for k, (p, m) in enumerate(top):
                w.writerow([k + 1, PARAMETERS[p], f"{m:.10e}"])
        idx = [p for p, _ in top]
        doc = svg.relevance_timeline([PARAMETER_NAMES[p] for p in idx], rmap.values[:, idx].T,
                                     raw.values[:, idx].T,
                                     title=f"{adm.admission_id}: risk {rmap.prediction:.3f}")
        with open(stem + "_top10.svg", "w") as fh:
            fh.write(doc)


def _read_relevance_dir(path):
    if not os.path.isdir(path):
        raise CliError("missing_file", f"explanations directory not found: {path}")
    files = sorted(f for f in os.listdir(path) if f.endswith("_relevance.csv"))
    maps, raws, masks = [], [], []
    code = {p: i for i, p in enumerate(PARAMETERS)}
    for name in files:
        with open(os.path.join(path, name), newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RELEVANCE_COLUMNS:
                raise CliError("schema_version", f"{name}: unexpected relevance columns")
            rows = list(reader)
        T = max(int(r["hour"]) for r in rows) + 1
        rel, raw, mask = np.zeros((T, N_FEATURES)), np.zeros((T, N_FEATURES)), np.zeros((T, N_FEATURES), bool)
        for r in rows:
            t, p = int(r["hour"]), code[r["parameter"]]
            rel[t, p], raw[t, p], mask[t, p] = float(r["relevance"]), float(r["value"]), r["observed"] == "1"
        maps.append(rel)
        raws.append(raw)
        masks.append(mask)
    return maps, raws, masks


def cmd_report(args, cfg):
    rows = evaluation.read_metrics(_need(args.metrics))
    os.makedirs(args.out, exist_ok=True)
    for ill in sorted({r["illness"] for r in rows}):
        summary = []
        for metric in ("auroc", "auprc"):
            series = []
            for m in sorted({r["model"] for r in rows if r["illness"] == ill}):
                hs = sorted({r["hours_before_onset"] for r in rows if r["illness"] == ill and r["model"] == m})
                means = []
                for h in hs:
                    vals = [r[metric] for r in rows if r["illness"] == ill and r["model"] == m
                            and r["hours_before_onset"] == h]
                    mean, lo, hi = evaluation.confidence_interval(vals)
                    means.append(mean)
                    summary.append([metric, m, h, len(vals), f"{mean:.10f}", f"{lo:.10f}", f"{hi:.10f}"])
                series.append((m, hs, means))
            ylim = (0.4, 1.0) if metric == "auroc" else (0.0, 1.0)
            with open(os.path.join(args.out, f"performance_{ill}_{metric}.svg"), "w") as fh:
                fh.write(svg.line_chart(series, f"{ill}: {metric.upper()}", "hours before onset",
                                        metric.upper(), ylim))
        with open(os.path.join(args.out, f"performance_{ill}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "model", "hours_before_onset", "n_folds", "mean", "ci_low", "ci_high"])
            w.writerows(summary)
    if args.explanations:
        maps, raws, masks = _read_relevance_dir(args.explanations)
        if not maps:
            raise CliError("missing_file", f"no *_relevance.csv files in {args.explanations}")
        gi = explain.global_importance(maps)
        with open(os.path.join(args.out, "global_importance.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "parameter", "mean_relevance"])
            for k, (p, m) in enumerate(gi.ranked()):
                w.writerow([k + 1, PARAMETERS[p], f"{m:.10e}"])
        top = gi.parameters[:20]
        with open(os.path.join(args.out, "global_importance.svg"), "w") as fh:
            fh.write(svg.bar_chart([PARAMETER_NAMES[p] for p in top], gi.mean_relevance[:20],
                                   "Global parameter importance", "mean relevance"))
        population = {p: np.concatenate([r[:, p][m[:, p]] for r, m in zip(raws, masks)]) for p in range(N_FEATURES)}
        points = explain.local_summary(maps, raws, masks, population)
        with open(os.path.join(args.out, "local_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient", "hour", "parameter", "value", "percentile", "relevance"])
            for pt in points:
                w.writerow([pt.patient, pt.timestep, PARAMETERS[pt.parameter], f"{pt.value:.10g}",
                            f"{pt.percentile:.10f}", f"{pt.relevance:.10e}"])
        strips = []
        for p in top:
            sel = [pt for pt in points if pt.parameter == p]
            strips.append((PARAMETER_NAMES[p], [pt.relevance for pt in sel], [pt.percentile for pt in sel]))
        with open(os.path.join(args.out, "local_summary.svg"), "w") as fh:
            fh.write(svg.beeswarm(strips, "Local explanation summary", seed=args.seed))


def cmd_evaluate(args, cfg):
    admissions = _events(args.events)
    labels = _labels_for(admissions, args.labels)
    settings = eval_settings(cfg, args)
    models = args.models or list(evaluation.MODELS)
    horizons = args.horizons or list(HORIZONS)
    try:
        rows = evaluation.horizon_sweep(admissions, labels, args.illness, models, horizons, settings)
    except evaluation.StratificationError as e:
        raise CliError("stratification", str(e)) from e
    with open(args.out, "w", newline="") as fh:
        evaluation.write_metrics(rows, fh)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)

    p = _Parser(prog="xaiews", description="Early warning of acute critical illness with explanations.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker processes for evaluate")
    p.add_argument("--config", default=None, help="JSON file with 'tcn' and 'evaluation' settings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic cohort")
    g.add_argument("--spec")
    g.add_argument("--out", required=True)
    g.add_argument("--n-admissions", type=int)

    lb = sub.add_parser("label", parents=[common], help="apply the gold-standard labelers")
    lb.add_argument("--events", required=True)
    lb.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a TCN or GB-Vital model")
    t.add_argument("--events", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--illness", choices=ILLNESSES, required=True)
    t.add_argument("--horizon", type=int, choices=HORIZONS, required=True)
    t.add_argument("--model", choices=("tcn", "gbvital"), default="tcn")
    t.add_argument("--train-negative-ratio", type=float)
    t.add_argument("--out", required=True)

    pr = sub.add_parser("predict", parents=[common], help="risk at given prediction times")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--events", required=True)
    pr.add_argument("--at", action="append", required=True, metavar="ADMISSION_ID,END_TIME")
    pr.add_argument("--out", required=True)

    ex = sub.add_parser("explain", parents=[common], help="relevance maps and top-10 figures")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--events", required=True)
    ex.add_argument("--admission", action="append", metavar="ID[,END_TIME]")
    ex.add_argument("--labels")
    ex.add_argument("--illness", choices=ILLNESSES)
    ex.add_argument("--horizon", type=int, choices=HORIZONS, default=0)
    ex.add_argument("--out-dir", required=True)

    ev = sub.add_parser("evaluate", parents=[common], help="cross-validated horizon sweep")
    ev.add_argument("--events", required=True)
    ev.add_argument("--labels", required=True)
    ev.add_argument("--illness", choices=ILLNESSES, required=True)
    ev.add_argument("--models", nargs="+", choices=evaluation.MODELS)
    ev.add_argument("--horizons", nargs="+", type=int, choices=HORIZONS)
    ev.add_argument("--folds", nargs="+", type=int, choices=range(evaluation.N_FOLDS))
    ev.add_argument("--train-negative-ratio", type=float)
    ev.add_argument("--warm-start", action="store_true",
                    help="start each horizon's TCN from the previous horizon's weights within a fold")
    ev.add_argument("--out", required=True)

    rp = sub.add_parser("report", parents=[common], help="performance and explanation figures")
    rp.add_argument("--metrics", required=True)
    rp.add_argument("--explanations")
    rp.add_argument("--out", required=True)
    return p


COMMANDS = {"generate": cmd_generate, "label": cmd_label, "train": cmd_train, "predict": cmd_predict,
            "explain": cmd_explain, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except CliError as e:
        return _fail(e.kind, str(e), 2 if e.kind == "usage" else 1)
    except evaluation.StratificationError as e:
        return _fail("stratification", str(e), 1)
    except (OSError, ValueError) as e:
        return _fail(type(e).__name__, str(e), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""AUROC/AUPRC, patient-level cross-validation and the horizon sweep."""
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _accel, baselines, tcn
from .core import make_rng
from .ehr import HORIZONS, fit_scaler, negative_window_end, prepare_grid, window_end_for
from .labels import compute_sofa_series

EXACT_PAIR_LIMIT = 10_000
N_DECILES = 10
N_FOLDS = 5
MODELS = ("tcn", "mews", "sofa", "gbvital")
METRIC_COLUMNS = ["hours_before_onset", "fold", "model", "illness", "auroc", "auprc"]


class UndefinedMetric(ValueError):
    pass


class StratificationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    return scores[labels], scores[~labels]


def auroc_pairs(scores, labels):
    pos, neg = _split_scores(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("AUROC needs both classes")
    return _accel.pair_auroc(pos, neg)


def midranks(x):
    """1-based ranks with tied values sharing their average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg = upper - (counts - 1) / 2.0
    return avg[inverse]


def auroc_rank(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    r = midranks(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_auroc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie); exact pair count up to 10^4 samples, midranks beyond."""
    if len(scores) <= EXACT_PAIR_LIMIT:
        return auroc_pairs(scores, labels)
    return auroc_rank(scores, labels)


def compute_auprc(scores, labels):
    """Average precision, sum over thresholds of (R_k - R_{k-1}) * P_k; tied scores form one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def confidence_interval(values):
    """(mean, lower, upper) with half width 1.96 sd / sqrt(n); NaN bounds for a single value."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, math.nan, math.nan
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(len(v))
    return mean, mean - half, mean + half


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def patient_deciles(admissions, labels, illness, seed=0, n_deciles=N_DECILES):
    """patient_id -> decile; patients with a positive admission are spread first so every decile gets some."""
    positive = {}
    for adm, lab in zip(admissions, labels):
        positive[adm.patient_id] = positive.get(adm.patient_id, False) or lab[illness].positive
    pos = sorted(p for p, v in positive.items() if v)
    neg = sorted(p for p, v in positive.items() if not v)
    if len(pos) < n_deciles:
        raise StratificationError(
            f"{illness}: {len(pos)} patients with positives, need at least {n_deciles} (one per decile)")
    rng = make_rng([seed, 0xDEC])
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    out = {p: i % n_deciles for i, p in enumerate(pos)}
    out.update({p: (len(pos) + i) % n_deciles for i, p in enumerate(neg)})
    return out


def fold_split(admissions, deciles, fold, n_deciles=N_DECILES):
    """Admission index arrays (train, validation, test) for one fold."""
    d = np.array([deciles[a.patient_id] for a in admissions])
    test = d == fold
    val = d == (fold + 1) % n_deciles
    return np.nonzero(~(test | val))[0], np.nonzero(val)[0], np.nonzero(test)[0]


def negative_window_ends(admissions, seed=0):
    """One prediction time per admission, shared by every horizon and illness."""
    return np.array([negative_window_end(a, make_rng([seed, 0x4E, i])) for i, a in enumerate(admissions)])


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    index: np.ndarray     # admission indices
    ends: np.ndarray      # prediction times
    y: np.ndarray


def window_set(admissions, labels, illness, horizon, indices, neg_ends):
    idx, ends, y = [], [], []
    for i in indices:
        lab = labels[i][illness]
        if lab.positive:
            end = window_end_for(lab.onset_time, horizon, True)
            if end is None:
                continue
        else:
            end = neg_ends[i]
        idx.append(i)
        ends.append(end)
        y.append(int(lab.positive))
    return WindowSet(np.array(idx, dtype=np.int64), np.array(ends, dtype=np.float64),
                     np.array(y, dtype=np.int64))


def subsample_negatives(ws, ratio, rng):
    """Keep every positive and at most ``ratio`` negatives per positive."""
    if ratio is None:
        return ws
    pos = np.nonzero(ws.y == 1)[0]
    neg = np.nonzero(ws.y == 0)[0]
    keep_n = min(len(neg), int(math.ceil(ratio * max(1, len(pos)))))
    keep = np.sort(np.concatenate([pos, rng.choice(neg, size=keep_n, replace=False)]))
    return WindowSet(ws.index[keep], ws.ends[keep], ws.y[keep])


def grids(admissions, ws, scaler):
    x = np.empty((len(ws.y), 24, scaler.minimum.shape[0]))
    for k, (i, end) in enumerate(zip(ws.index, ws.ends)):
        x[k] = prepare_grid(admissions[i], end, scaler)[0].values
    return x


def _just_before(t):
    # baselines read the same history as the window: events strictly before t
    return float(np.nextafter(t, -np.inf))


# ---------------------------------------------------------------------------
# Model families
# ---------------------------------------------------------------------------

@dataclass
class FitContext:
    admissions: list
    labels: list
    illness: str
    horizon: int
    train: WindowSet
    val: WindowSet
    seed: int = 0
    tcn_config: tcn.TcnConfig = None
    log: object = None
    sofa_cache: dict = field(default_factory=dict)
    init_weights: list = None     # TCN starting weights (warm start); None -> fresh init
    fitted_tcn: object = None     # set by fit_tcn


def fit_tcn(ctx):
    """Train a TCN on the context's windows; returns (network, scaler)."""
    train_adms = [ctx.admissions[i] for i in np.unique(ctx.train.index)]
    scaler = fit_scaler(train_adms)
    cfg = ctx.tcn_config or tcn.TcnConfig(seed=ctx.seed)
    net = tcn.build_network(cfg)
    if ctx.init_weights is not None:
        net.set_parameters(ctx.init_weights)
    tcn.train(net, grids(ctx.admissions, ctx.train, scaler), ctx.train.y,
              grids(ctx.admissions, ctx.val, scaler), ctx.val.y, cfg, log=ctx.log)
    ctx.fitted_tcn = net
    return net, scaler


def fit_gbvital(ctx):
    medians = baselines.fit_vital_medians([ctx.admissions[i] for i in np.unique(ctx.train.index)])
    X = gbvital_matrix(ctx.admissions, ctx.train, medians)
    return baselines.train_gbm(X, ctx.train.y), medians


def gbvital_matrix(admissions, ws, medians):
    return np.array([baselines.build_gbvital_features(admissions[i], end, medians)
                     for i, end in zip(ws.index, ws.ends)]).reshape(len(ws.y), -1)


def score_windows(model, ctx, test):
    """Risk scores for ``test`` windows under a model family name or a callable(adm, end)."""
    adms = ctx.admissions
    if callable(model):
        return np.array([model(adms[i], end) for i, end in zip(test.index, test.ends)], dtype=np.float64)
    if model == "mews":
        return np.array([baselines.compute_mews(adms[i], _just_before(end))
                         for i, end in zip(test.index, test.ends)], dtype=np.float64)
    if model == "sofa":
        out = []
        for i, end in zip(test.index, test.ends):
            if i not in ctx.sofa_cache:
                ctx.sofa_cache[i] = compute_sofa_series(adms[i])
            out.append(ctx.sofa_cache[i].value_at(_just_before(end)))
        return np.array(out, dtype=np.float64)
    if model == "gbvital":
        gbm, medians = fit_gbvital(ctx)
        return gbm.predict(gbvital_matrix(adms, test, medians))
    if model == "tcn":
        net, scaler = fit_tcn(ctx)
        return tcn.predict_risk(net, grids(adms, test, scaler))
    raise ValueError(f"unknown model family {model!r}")


# ---------------------------------------------------------------------------
# Cross-validation and the horizon sweep
# ---------------------------------------------------------------------------

@dataclass
class EvalSettings:
    seed: int = 0
    folds: tuple = tuple(range(N_FOLDS))
    train_negative_ratio: float = None
    tcn_config: tcn.TcnConfig = None
    threads: int = 1
    # start each horizon's TCN from the same fold's previous (shorter) horizon
    warm_start: bool = False


@dataclass
class CvResult:
    model: str
    illness: str
    horizon: int
    folds: list
    auroc: tuple
    auprc: tuple


def _fold_job(admissions, labels, illness, horizon, fold, models, settings, deciles, neg_ends, log=None,
              init_weights=None):
    rows, _ = _fold_run(admissions, labels, illness, horizon, fold, models, settings, deciles, neg_ends, log,
                        init_weights)
    return rows


def _fold_run(admissions, labels, illness, horizon, fold, models, settings, deciles, neg_ends, log, init_weights):
    """Rows for one (horizon, fold) and the trained TCN weights (None without a TCN)."""
    tr, va, te = fold_split(admissions, deciles, fold)
    train_ws = window_set(admissions, labels, illness, horizon, tr, neg_ends)
    train_ws = subsample_negatives(train_ws, settings.train_negative_ratio,
                                   make_rng([settings.seed, 0x55, fold]))
    ctx = FitContext(admissions, labels, illness, horizon, train_ws,
                     window_set(admissions, labels, illness, horizon, va, neg_ends),
                     settings.seed, settings.tcn_config, log, init_weights=init_weights)
    test = window_set(admissions, labels, illness, horizon, te, neg_ends)
    rows = []
    for m in models:
        s = score_windows(m, ctx, test)
        rows.append({"hours_before_onset": horizon, "fold": fold,
                     "model": m if isinstance(m, str) else getattr(m, "__name__", "custom"),
                     "illness": illness, "auroc": compute_auroc(s, test.y), "auprc": compute_auprc(s, test.y)})
    weights = None if ctx.fitted_tcn is None else [p.copy() for p in ctx.fitted_tcn.parameters()]
    return rows, weights


def _warm_chain(admissions, labels, illness, horizons, fold, models, settings, deciles, neg_ends, log=None):
    rows, weights = [], None
    for h in horizons:
        r, weights = _fold_run(admissions, labels, illness, h, fold, models, settings, deciles, neg_ends, log,
                               weights)
        rows.extend(r)
    return rows


def _run_jobs(jobs, threads, fn=_fold_job):
    if threads <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


def cross_validate(admissions, labels, model, illness, horizon, settings=None):
    settings = settings or EvalSettings()
    deciles = patient_deciles(admissions, labels, illness, settings.seed)
    neg_ends = negative_window_ends(admissions, settings.seed)
    jobs = [(admissions, labels, illness, horizon, f, (model,), settings, deciles, neg_ends)
            for f in settings.folds]
    rows = [r for job_rows in _run_jobs(jobs, settings.threads) for r in job_rows]
    return CvResult(rows[0]["model"], illness, horizon, rows,
                    confidence_interval([r["auroc"] for r in rows]),
                    confidence_interval([r["auprc"] for r in rows]))


def horizon_sweep(admissions, labels, illness, models=MODELS, horizons=HORIZONS, settings=None, log=None):
    """Rows (hours_before_onset, fold, model, illness, auroc, auprc) over horizons x models x folds.

    With ``settings.warm_start`` the horizons run in ascending order within each
    fold and every TCN starts from the previous horizon's trained weights.
    """
    settings = settings or EvalSettings()
    deciles = patient_deciles(admissions, labels, illness, settings.seed)
    neg_ends = negative_window_ends(admissions, settings.seed)
    job_log = log if settings.threads <= 1 else None
    if settings.warm_start:
        order = sorted(horizons)
        jobs = [(admissions, labels, illness, order, f, tuple(models), settings, deciles, neg_ends, job_log)
                for f in settings.folds]
        by_fold = _run_jobs(jobs, settings.threads, _warm_chain)
        # same row order as the cold path: horizon-major, then fold
        return [r for h in order for rows in by_fold for r in rows if r["hours_before_onset"] == h]
    jobs = [(admissions, labels, illness, h, f, tuple(models), settings, deciles, neg_ends, job_log)
            for h in horizons for f in settings.folds]
    return [r for job_rows in _run_jobs(jobs, settings.threads) for r in job_rows]


def write_metrics(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["hours_before_onset"], r["fold"], r["model"], r["illness"],
                    f"{r['auroc']:.10f}", f"{r['auprc']:.10f}"])


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metric columns {reader.fieldnames}")
        return [{"hours_before_onset": int(r["hours_before_onset"]), "fold": int(r["fold"]),
                 "model": r["model"], "illness": r["illness"],
                 "auroc": float(r["auroc"]), "auprc": float(r["auprc"])} for r in reader]

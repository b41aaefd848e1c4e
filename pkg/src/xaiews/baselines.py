"""Comparison models: MEWS (TOKS bands), raw SOFA, and GB-Vital gradient boosting."""
import bisect
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import _accel
from .ehr import CODE
from .labels import compute_sofa_series

MEWS_VITALS = ("systolic_bp", "pulse", "resp_rate", "temperature", "spo2")
GB_VITALS = ("systolic_bp", "diastolic_bp", "pulse", "resp_rate", "spo2", "temperature")
GB_FEATURE_NAMES = [f"{v}_{s}" for v in GB_VITALS
                    for s in ("mean_h0", "mean_h1", "mean_h2", "trend_01", "trend_12")]


def load_mews_table(path=None):
    if path is None:
        with resources.files("xaiews.data").joinpath("mews_table.json").open() as fh:
            return json.load(fh)
    with open(path) as fh:
        return json.load(fh)


MEWS_TABLE = load_mews_table()


def mews_subscore(vital, value, table=MEWS_TABLE):
    band = table["vitals"][vital]
    return band["scores"][bisect.bisect_right(band["edges"], value)]


def _latest(adm, parameter, t):
    times, vals = adm.series(parameter)
    i = np.searchsorted(times, t, side="right") - 1
    return None if i < 0 else float(vals[i])


def compute_mews(adm, t, table=MEWS_TABLE):
    """Sum of band scores at the carry-forward vital values as of ``t``; missing vitals score 0."""
    total = 0
    for v in MEWS_VITALS:
        x = _latest(adm, v, t)
        if x is not None:
            total += mews_subscore(v, x, table)
    return total


def sofa_risk(adm, t, series=None):
    series = compute_sofa_series(adm) if series is None else series
    return series.value_at(t)


# ---------------------------------------------------------------------------
# GB-Vital features
# ---------------------------------------------------------------------------

def fit_vital_medians(admissions):
    med = {}
    for v in GB_VITALS:
        vals = np.concatenate([a.values[a.codes == CODE[v]] for a in admissions]) if admissions else []
        med[v] = float(np.median(vals)) if len(vals) else 0.0
    return med


def build_gbvital_features(adm, window_end, medians):
    """30 features: per vital the hourly means of the last three hours and their two differences.

    An empty hour takes the last value observed before that hour ends, then
    the training median.
    """
    out = []
    for v in GB_VITALS:
        times, vals = adm.series(v)
        means = []
        for h in range(3):
            lo, hi = window_end - h - 1, window_end - h
            a = np.searchsorted(times, lo, side="left")
            b = np.searchsorted(times, hi, side="left")
            if b > a:
                means.append(float(vals[a:b].mean()))
            elif b > 0:
                means.append(float(vals[b - 1]))
            else:
                means.append(medians[v])
        out.extend([means[0], means[1], means[2], means[0] - means[1], means[1] - means[2]])
    return np.array(out)


# ---------------------------------------------------------------------------
# Gradient boosting on logistic loss
# ---------------------------------------------------------------------------

@dataclass
class Tree:
    """Flat binary tree: internal nodes have feature >= 0; x <= threshold goes left."""
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left = np.array(self.left)
        right = np.array(self.right)
        while True:
            f = feat[node]
            internal = f >= 0
            if not internal.any():
                break
            idx = np.nonzero(internal)[0]
            go_left = X[idx, f[idx]] <= thr[node[idx]]
            node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
        return np.array(self.value)[node]

    def to_dict(self):
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "value": self.value}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(y, raw):
    # log(1 + exp(-s z)) with s = +-1, stable form
    s = 2.0 * y - 1.0
    return float(np.mean(np.logaddexp(0.0, -s * raw)))


@dataclass
class GbmModel:
    init: float
    shrinkage: float
    trees: list = field(default_factory=list)
    loss_history: list = field(default_factory=list)

    def decision_function(self, X):
        X = np.asarray(X, dtype=np.float64)
        raw = np.full(len(X), self.init)
        for t in self.trees:
            raw += self.shrinkage * t.predict(X)
        return raw

    def predict(self, X):
        return _sigmoid(self.decision_function(X))

    def to_dict(self):
        return {"format": "xaiews-gbm", "version": 1, "init": self.init, "shrinkage": self.shrinkage,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "xaiews-gbm" or d.get("version") != 1:
            raise ValueError("not a version-1 GBM checkpoint")
        return cls(d["init"], d["shrinkage"], [Tree(**t) for t in d["trees"]])


BASE_RATE_CLAMP = 1e-6


def _fit_tree(X, target, order, max_depth):
    tree = Tree()

    def grow(mask, depth):
        node = len(tree.feature)
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append(float(target[mask].mean()))
        if depth >= max_depth:
            return node
        f, thr, gain = _accel.best_split(X, target, order, mask)
        # gains at round-off level (a pure node) are not splits
        if f < 0 or gain <= 1e-12 * float(np.sum(target[mask] ** 2)):
            return node
        go_left = X[:, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = grow(mask & go_left, depth + 1)
        tree.right[node] = grow(mask & ~go_left, depth + 1)
        return node

    grow(np.ones(len(target), dtype=bool), 0)
    return tree


def train_gbm(X, y, n_trees=100, max_depth=3, shrinkage=0.1):
    """Gradient boosting on logistic loss.

    Each tree is fit by variance-reduction splits to the negative gradient
    (y - p); leaves hold the mean residual.  The procedure has no randomness,
    so repeated fits are identical.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rate = float(np.clip(y.mean(), BASE_RATE_CLAMP, 1.0 - BASE_RATE_CLAMP))
    model = GbmModel(float(np.log(rate / (1.0 - rate))), shrinkage)
    raw = np.full(len(y), model.init)
    model.loss_history.append(logistic_loss(y, raw))
    if y.min() == y.max():
        return model
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    for _ in range(n_trees):
        residual = y - _sigmoid(raw)
        tree = _fit_tree(X, residual, order, max_depth)
        model.trees.append(tree)
        raw += shrinkage * tree.predict(X)
        model.loss_history.append(logistic_loss(y, raw))
    return model


def predict_gbm(model, X):
    return model.predict(X)

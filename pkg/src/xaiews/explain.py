"""Deep Taylor decomposition (z+ rule) for the TCN, plus population summaries.

Relevance starts at the positive part of the positive-class logit and is
redistributed layer by layer with

    R_{i<-j} = w+_ij a_i / (sum_i w+_ij a_i + eps) * R_j,      R_i = sum_j R_{i<-j}

ReLU, dropout (inactive at inference) and layer normalisation pass relevance
through unchanged.  Because normalisation is treated as the identity, the
activation a linear layer sees during the backward sweep is the tensor that
*entered* the preceding normalisation, which is a ReLU output and hence
non-negative.  Bias terms receive no relevance.  Whatever a zero denominator
swallows is reported as leakage instead of silently vanishing.
"""
from dataclasses import dataclass

import numpy as np

from . import _accel
from .core import causal_conv1d_forward
from .tcn import run_forward

EPS = 1e-12
_TRANSPARENT = ("layer_norm", "spatial_dropout", "relu")


@dataclass
class RelevanceMap:
    values: np.ndarray
    prediction: float
    start_relevance: float
    leakage: float = 0.0
    no_positive_evidence: bool = False

    @property
    def total(self):
        return float(self.values.sum())


def zplus_linear(a, w, r_out, eps=EPS):
    """z+ through a dense map ``z_j = sum_i a_i w_ij``.

    ``a`` is (..., n_in), ``w`` (n_in, n_out), ``r_out`` (..., n_out).
    Returns (r_in, leakage) with leakage summed over the trailing axis.
    Leakage is the share eps / (z + eps) of each output's relevance that the
    stabiliser keeps back, computed from z rather than as a residual.
    """
    a = np.asarray(a, dtype=np.float64)
    wp = np.maximum(np.asarray(w, dtype=np.float64), 0.0)
    r_out = np.asarray(r_out, dtype=np.float64)
    z = a @ wp
    s = r_out / (z + eps)
    r_in = a * (s @ wp.T)
    return r_in, (s * eps).sum(axis=-1)


def zplus_conv(a, w, dilation, r_out, eps=EPS):
    """z+ through the unrolled causal convolution; zero padding absorbs nothing."""
    a = np.asarray(a, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a, r_out = a[None], np.asarray(r_out)[None]
    w = np.ascontiguousarray(w, dtype=np.float64)
    r_out = np.ascontiguousarray(r_out, dtype=np.float64)
    r_in = _accel.zplus_conv(np.ascontiguousarray(a), w, dilation, r_out, eps)
    wp = np.maximum(w, 0.0)
    z = causal_conv1d_forward(a, wp, np.zeros(wp.shape[2]), dilation)
    leak = (r_out * eps / (z + eps)).sum(axis=(1, 2))
    if squeeze:
        return r_in[0], leak[0]
    return r_in, leak


def propagate_gap(pooled_relevance, activations, eps=EPS):
    """z+ through global average pooling (equal weights 1/T per time step)."""
    a = np.asarray(activations, dtype=np.float64)
    T = a.shape[-2]
    r = np.asarray(pooled_relevance, dtype=np.float64)
    z = a.mean(axis=-2) + eps
    r_in = (a / T) * (r / z)[..., None, :]
    return r_in, (r * eps / z).sum(axis=-1)


def propagate_layernorm(r_out):
    return r_out


def _effective_inputs(net, cache):
    """Activation entering each layer once normalisation is taken as the identity."""
    eff = []
    for i, layer in enumerate(net.layers):
        if i == 0:
            eff.append(cache.inputs[0])
            continue
        prev = net.layers[i - 1].spec.kind
        if prev in ("layer_norm", "spatial_dropout"):
            eff.append(eff[i - 1])
        elif prev == "global_avg_pool":
            eff.append(eff[i - 1].mean(axis=-2))
        else:
            eff.append(cache.inputs[i])
    return eff


def explain_batch(net, x, target=1, eps=EPS):
    """Relevance for a batch of grids.

    Returns dict with ``relevance`` (B,T,F), ``start`` (B,), ``leakage`` (B,),
    ``prediction`` (B,) and ``logit`` (B,).
    """
    cache = run_forward(net, x, training=False)
    logit = cache.logits[:, target]
    start = np.maximum(logit, 0.0)
    eff = _effective_inputs(net, cache)
    leakage = np.zeros(len(start))
    r = None
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        kind = layer.spec.kind
        if kind == "softmax" or kind in _TRANSPARENT:
            continue
        if kind == "dense":
            w = layer.params["w"][:, target:target + 1]
            r, leak = zplus_linear(eff[i], w, start[:, None], eps)
        elif kind == "global_avg_pool":
            r, leak = propagate_gap(r, eff[i], eps)
        elif kind == "causal_conv1d":
            r, leak = zplus_conv(eff[i], layer.params["w"], layer.spec.dilation, r, eps)
        else:
            raise ValueError(f"no relevance rule for layer kind {kind}")
        leakage += leak
    return {"relevance": r, "start": start, "leakage": leakage,
            "prediction": cache.probs[:, target], "logit": logit}


def explain(net, grid):
    """RelevanceMap for one scaled (T, F) grid (or an ``HourlyGrid``)."""
    x = getattr(grid, "values", grid)
    out = explain_batch(net, np.asarray(x)[None])
    return RelevanceMap(values=out["relevance"][0], prediction=float(out["prediction"][0]),
                        start_relevance=float(out["start"][0]), leakage=float(out["leakage"][0]),
                        no_positive_evidence=bool(out["logit"][0] <= 0.0))


def top_k(relevance, k=10):
    """Parameter indices ranked by mean relevance over time; ties go to the lower index."""
    values = getattr(relevance, "values", relevance)
    means = np.asarray(values).mean(axis=0)
    order = np.lexsort((np.arange(len(means)), -means))
    return [(int(i), float(means[i])) for i in order[:k]]


@dataclass
class GlobalImportance:
    parameters: list
    mean_relevance: list

    def ranked(self):
        return list(zip(self.parameters, self.mean_relevance))


def global_importance(relevance_maps, masks=None):
    """Mean relevance per parameter over every (time step, patient) datapoint, descending.

    With ``masks`` only observed cells count; otherwise every cell does.
    """
    maps = np.stack([getattr(m, "values", m) for m in relevance_maps])
    flat = maps.reshape(-1, maps.shape[-1])
    if masks is None:
        means = flat.mean(axis=0)
    else:
        mk = np.stack(masks).reshape(-1, maps.shape[-1])
        n = mk.sum(axis=0)
        means = np.where(n > 0, (flat * mk).sum(axis=0) / np.maximum(n, 1), 0.0)
    order = np.lexsort((np.arange(len(means)), -means))
    return GlobalImportance([int(i) for i in order], [float(means[i]) for i in order])


@dataclass
class LocalSummaryPoint:
    parameter: int
    relevance: float
    value: float
    percentile: float
    timestep: int = 0
    patient: int = 0


def empirical_cdf(population_values, x, presorted=False):
    """Fraction of the population <= x; always in [0, 1]."""
    pop = np.asarray(population_values, dtype=np.float64)
    if not presorted:
        pop = np.sort(pop)
    if len(pop) == 0:
        return np.full(np.shape(x), 0.5)
    return np.searchsorted(pop, x, side="right") / len(pop)


def local_summary(relevance_maps, raw_values, masks, population):
    """One point per observed (patient, time step, parameter) cell.

    ``population`` maps parameter index -> every observed value of that
    parameter in the full dataset; it drives the percentile colouring.
    """
    pops = {int(k): np.sort(np.asarray(v, dtype=np.float64)) for k, v in population.items()}
    points = []
    for patient, (rel, raw, mask) in enumerate(zip(relevance_maps, raw_values, masks)):
        rel = getattr(rel, "values", rel)
        ts, ps = np.nonzero(mask)
        for t, p in zip(ts, ps):
            pct = empirical_cdf(pops.get(int(p), ()), raw[t, p], presorted=True)
            points.append(LocalSummaryPoint(int(p), float(rel[t, p]), float(raw[t, p]),
                                            float(np.clip(pct, 0.0, 1.0)), int(t), patient))
    return points

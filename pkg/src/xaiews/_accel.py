"""Hot loops with a numba path and a pure-numpy path.

Set ``XAIEWS_NUMBA=0`` before import to force the numpy path (useful when
numba is missing or when checking the two paths against each other).  Each
public kernel below dispatches on :data:`USE_NUMBA`; the ``*_loops`` and
``*_numpy`` variants stay importable so tests and the benchmark can call
both directly.
"""
import os

import numpy as np


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    njit = _noop_jit
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("XAIEWS_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# z+ relevance through a causal dilated convolution
# ---------------------------------------------------------------------------

@njit(cache=True)
def zplus_conv_loops(a, w, dilation, r_out, eps):
    """a: (B,T,Cin) >= 0, w: (K,Cin,Cout), r_out: (B,T,Cout)."""
    B, T, Cin = a.shape
    K = w.shape[0]
    Cout = w.shape[2]
    r_in = np.zeros((B, T, Cin))
    for b in range(B):
        for t in range(T):
            for o in range(Cout):
                r = r_out[b, t, o]
                if r == 0.0:
                    continue
                z = 0.0
                for k in range(K):
                    src = t - (K - 1 - k) * dilation
                    if src < 0:
                        continue
                    for c in range(Cin):
                        wk = w[k, c, o]
                        if wk > 0.0:
                            z += wk * a[b, src, c]
                s = r / (z + eps)
                for k in range(K):
                    src = t - (K - 1 - k) * dilation
                    if src < 0:
                        continue
                    for c in range(Cin):
                        wk = w[k, c, o]
                        if wk > 0.0:
                            r_in[b, src, c] += wk * a[b, src, c] * s
    return r_in


def zplus_conv_numpy(a, w, dilation, r_out, eps):
    from .core import causal_conv1d_forward, causal_conv1d_input_grad

    wp = np.maximum(w, 0.0)
    z = causal_conv1d_forward(a, wp, np.zeros(w.shape[2]), dilation)
    s = r_out / (z + eps)
    return a * causal_conv1d_input_grad(s, wp, dilation)


# above about this much work (B*T*Cin*Cout) the BLAS-backed path is faster;
# below it the loops avoid numpy's per-call overhead
ZPLUS_LOOP_MAX_WORK = 4096


def zplus_conv(a, w, dilation, r_out, eps):
    if USE_NUMBA and a.shape[0] * a.shape[1] * w.shape[1] * w.shape[2] <= ZPLUS_LOOP_MAX_WORK:
        return zplus_conv_loops(a, w, int(dilation), r_out, float(eps))
    return zplus_conv_numpy(a, w, dilation, r_out, eps)


# ---------------------------------------------------------------------------
# Exact pairwise AUROC (Mann-Whitney with half credit for ties)
# ---------------------------------------------------------------------------

@njit(cache=True)
def pair_auroc_loops(pos, neg):
    # integer counts keep the inner loop branch-free and the sum exact
    wins = 0
    ties = 0
    for i in range(pos.shape[0]):
        p = pos[i]
        for j in range(neg.shape[0]):
            q = neg[j]
            wins += p > q
            ties += p == q
    return (wins + 0.5 * ties) / (pos.shape[0] * neg.shape[0])


def pair_auroc_numpy(pos, neg):
    # chunked to bound memory at O(chunk * n_neg)
    acc = 0.0
    step = max(1, 2_000_000 // max(1, neg.shape[0]))
    for i in range(0, pos.shape[0], step):
        p = pos[i:i + step, None]
        acc += np.sum(p > neg[None, :]) + 0.5 * np.sum(p == neg[None, :])
    return acc / (pos.shape[0] * neg.shape[0])


def pair_auroc(pos, neg):
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    neg = np.ascontiguousarray(neg, dtype=np.float64)
    if USE_NUMBA:
        return float(pair_auroc_loops(pos, neg))
    return float(pair_auroc_numpy(pos, neg))


# ---------------------------------------------------------------------------
# Best variance-reduction split for one tree node
# ---------------------------------------------------------------------------

@njit(cache=True)
def best_split_loops(X, target, order, idx_mask):
    """Scan every feature's presorted order restricted to the node.

    Returns (feature, threshold, gain); feature == -1 when no split exists.
    Gain is the reduction in sum of squared deviations.
    """
    n, d = X.shape
    total = 0.0
    count = 0
    for i in range(n):
        if idx_mask[i]:
            total += target[i]
            count += 1
    best_gain = 0.0
    best_feat = -1
    best_thr = 0.0
    if count < 2:
        return best_feat, best_thr, best_gain
    base = total * total / count
    for f in range(d):
        left_sum = 0.0
        left_n = 0
        prev = 0.0
        for r in range(n):
            i = order[r, f]
            if not idx_mask[i]:
                continue
            x = X[i, f]
            if left_n > 0 and x > prev:
                right_n = count - left_n
                right_sum = total - left_sum
                gain = left_sum * left_sum / left_n + right_sum * right_sum / right_n - base
                if gain > best_gain * (1.0 + 1e-12) + 1e-300:
                    best_gain = gain
                    best_feat = f
                    best_thr = 0.5 * (prev + x)
            left_sum += target[i]
            left_n += 1
            prev = x
    return best_feat, best_thr, best_gain


def best_split_numpy(X, target, order, idx_mask):
    count = int(idx_mask.sum())
    if count < 2:
        return -1, 0.0, 0.0
    total = float(target[idx_mask].sum())
    base = total * total / count
    best = (-1, 0.0, 0.0)
    for f in range(X.shape[1]):
        o = order[:, f]
        o = o[idx_mask[o]]
        xs = X[o, f]
        cs = np.cumsum(target[o])
        left_n = np.arange(1, count)
        left_sum = cs[:-1]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        right_sum = total - left_sum
        gain = left_sum ** 2 / left_n + right_sum ** 2 / (count - left_n) - base
        gain = np.where(valid, gain, -np.inf)
        # first index reaching the max mirrors the sequential scan's tie rule
        k = int(np.argmax(gain))
        g = float(gain[k])
        if g > best[2] * (1.0 + 1e-12) + 1e-300:
            best = (f, 0.5 * (xs[k] + xs[k + 1]), g)
    return best


def best_split(X, target, order, idx_mask):
    if USE_NUMBA:
        f, thr, g = best_split_loops(X, target, order, idx_mask)
        return int(f), float(thr), float(g)
    return best_split_numpy(X, target, order, idx_mask)


# ---------------------------------------------------------------------------
# Hourly bucketing: mean of event values per (bin, parameter)
# ---------------------------------------------------------------------------

@njit(cache=True)
def bucket_loops(bins, codes, values, n_bins, n_params):
    sums = np.zeros((n_bins, n_params))
    counts = np.zeros((n_bins, n_params), dtype=np.int64)
    for i in range(bins.shape[0]):
        sums[bins[i], codes[i]] += values[i]
        counts[bins[i], codes[i]] += 1
    return sums, counts


def bucket_numpy(bins, codes, values, n_bins, n_params):
    flat = bins * n_params + codes
    sums = np.bincount(flat, weights=values, minlength=n_bins * n_params)
    counts = np.bincount(flat, minlength=n_bins * n_params)
    return sums.reshape(n_bins, n_params), counts.reshape(n_bins, n_params)


def bucket(bins, codes, values, n_bins, n_params):
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        return bucket_loops(bins, codes, values, n_bins, n_params)
    return bucket_numpy(bins, codes, values, n_bins, n_params)

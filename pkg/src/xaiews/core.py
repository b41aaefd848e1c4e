"""Deterministic float64 kernels the TCN and the relevance engine are built from.

Arrays are plain ``numpy.ndarray`` of dtype float64.  Sequence tensors are laid
out ``(T, C)`` or batched ``(B, T, C)``; every kernel here accepts either.
"""
from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5
CE_CLAMP = 1e-15


class ShapeError(ValueError):
    pass


def make_rng(seed):
    """Philox4x64 counter-based generator.

    Philox is used for every stochastic step so that a seed gives the same
    stream on every platform; ``seed`` may be an int or a sequence of ints
    (hashed through ``SeedSequence``).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def he_init(rng, shape, fan_in):
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (T,C) or (B,T,C), got shape {x.shape}")


def _im2col(x, kernel_size, dilation):
    # (B,T,C) -> (B,T,K*C); tap k looks back (K-1-k)*dilation steps
    B, T, C = x.shape
    cols = np.zeros((B, T, kernel_size, C))
    for k in range(kernel_size):
        shift = (kernel_size - 1 - k) * dilation
        if shift < T:
            cols[:, shift:, k, :] = x[:, :T - shift, :]
    return cols.reshape(B, T, kernel_size * C)


def causal_conv1d_forward(x, w, b, dilation):
    """out[t,o] = b[o] + sum_{k,c} w[k,c,o] * x[t-(K-1-k)*dilation, c], zero left padding."""
    xb, squeeze = _batched(x)
    K, cin, cout = w.shape
    if xb.shape[2] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {xb.shape[2]}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    out = _im2col(xb, K, dilation) @ w.reshape(K * cin, cout) + b
    return out[0] if squeeze else out


def causal_conv1d_input_grad(grad_out, w, dilation):
    """Adjoint of the convolution with respect to its input (bias-free)."""
    gb, squeeze = _batched(grad_out)
    K, cin, cout = w.shape
    B, T, _ = gb.shape
    gcols = (gb @ w.reshape(K * cin, cout).T).reshape(B, T, K, cin)
    gx = np.zeros((B, T, cin))
    for k in range(K):
        shift = (K - 1 - k) * dilation
        if shift < T:
            gx[:, :T - shift, :] += gcols[:, shift:, k, :]
    return gx[0] if squeeze else gx


def causal_conv1d_backward(x, w, dilation, grad_out):
    """Returns (grad_x, grad_w, grad_b) summed over the batch."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    K, cin, cout = w.shape
    cols = _im2col(xb, K, dilation).reshape(-1, K * cin)
    gflat = gb.reshape(-1, cout)
    grad_w = (cols.T @ gflat).reshape(K, cin, cout)
    grad_b = gflat.sum(axis=0)
    grad_x = causal_conv1d_input_grad(gb, w, dilation)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def layer_norm_forward(x, gain, shift, eps=LN_EPS):
    """Normalise each time step over channels; returns (out, cache)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    # second pass removes the rounding left by the first; 1/sqrt(eps) would amplify it
    centered -= centered.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return gain * xhat + shift, (xhat, inv_std)


def layer_norm_backward(grad_out, gain, cache):
    xhat, inv_std = cache
    C = xhat.shape[-1]
    axes = tuple(range(grad_out.ndim - 1))
    grad_gain = (grad_out * xhat).sum(axis=axes)
    grad_shift = grad_out.sum(axis=axes)
    g = grad_out * gain
    grad_x = inv_std / C * (C * g - g.sum(axis=-1, keepdims=True)
                            - xhat * (g * xhat).sum(axis=-1, keepdims=True))
    return grad_x, grad_gain, grad_shift


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def spatial_dropout(x, rate, rng, training):
    """Drop whole channels of each sequence; returns (out, channel_mask or None).

    The mask is shaped ``(B, 1, C)`` (or ``(1, C)`` unbatched) and already
    carries the ``1/(1-rate)`` survivor scaling.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x, None
    mask_shape = x.shape[:-2] + (1, x.shape[-1])
    keep = rng.random(mask_shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def global_avg_pool(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] == 0:
        raise ValueError("global average pooling over zero time steps")
    return x.mean(axis=-2)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax_forward(x, w, b):
    logits = np.asarray(x, dtype=np.float64) @ w + b
    return logits, softmax(logits)


def cross_entropy(probs, label):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        return float(-np.log(max(probs[label], CE_CLAMP)))
    picked = probs[np.arange(probs.shape[0]), np.asarray(label)]
    return -np.log(np.maximum(picked, CE_CLAMP))


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params, grads, state):
    """In-place Adam update of every array in ``params``; returns (params, state)."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state

"""Differentiable layer operations, channels-last (H, W, C) layout.

Spatial ops accept a single image ``(H, W, C)`` or a batch ``(N, H, W, C)``;
dense accepts ``(N,)`` or ``(B, N)``.  Every op registers an exact backward
rule with the tensor graph.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError, InputError, NumericError
from .tensor import Tensor, check_finite

LOG_CLAMP = 1e-12


def _batched(x):
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def conv2d(x, kernels, bias, stride=1, padding=0):
    """2-D cross-correlation: ``out[y, x, f] = bias[f] + sum(window * kernels[..., f])``."""
    xd, batched = _batched(x)
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be (K, K, C, F), got {kernels.shape}")
    k, k2, c, f = kernels.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {k}x{k2}")
    if xd.shape[3] != c:
        raise DimensionError(f"input has {xd.shape[3]} channels, kernels expect {c}")
    if bias.shape != (f,):
        raise DimensionError(f"bias must have shape ({f},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    n, h, w, _ = xd.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"input {h}x{w} (padding {padding}) smaller than kernel {k}")

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, c, ki, kj) -> rows ordered (ki, kj, c) to match kernels.reshape
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wm = kernels.data.reshape(k * k * c, f)
    out = cols @ wm + bias.data
    out = out.reshape(n, ho, wo, f) if batched else out.reshape(ho, wo, f)
    xp_shape = xp.shape

    def backward(g):
        g2 = g.reshape(-1, f)
        dk = (cols.T @ g2).reshape(k, k, c, f)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, padding : padding + h, padding : padding + w, :]
            dx = dx if batched else dx[0]
        return dx, dk, db

    return Tensor._from_op(out, (x, kernels, bias), backward, "conv2d")


def dense(x, weights, bias):
    """Affine map ``weights @ x + bias`` for a vector or a batch of row vectors."""
    if weights.ndim != 2 or x.ndim not in (1, 2):
        raise DimensionError(f"dense: bad shapes input {x.shape}, weights {weights.shape}")
    m, n = weights.shape
    if x.shape[-1] != n:
        raise DimensionError(f"dense: weights expect {n} inputs, got {x.shape[-1]}")
    if bias.shape != (m,):
        raise DimensionError(f"dense: bias must have shape ({m},), got {bias.shape}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def backward(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor._from_op(out, (x, weights, bias), backward, "dense")


def relu(x):
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def maxpool2(x):
    """2x2 non-overlapping max pool; ties route to the first cell in scan order."""
    xd, batched = _batched(x)
    n, h, w, c = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    cells = xd.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = cells.argmax(axis=-1)[..., None]
    out = np.take_along_axis(cells, idx, axis=-1)[..., 0]

    def backward(g):
        g = g if batched else g[None]
        routed = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(routed, idx, g[..., None], axis=-1)
        dx = routed.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx if batched else dx[0],)

    return Tensor._from_op(out if batched else out[0], (x,), backward, "maxpool2")


def global_avg_pool(x):
    xd, batched = _batched(x)
    n, h, w, c = xd.shape
    out = xd.mean(axis=(1, 2))

    def backward(g):
        g = g if batched else g[None]
        dx = np.broadcast_to(g[:, None, None, :] / (h * w), xd.shape).copy()
        return (dx if batched else dx[0],)

    return Tensor._from_op(out if batched else out[0], (x,), backward, "global_avg_pool")


def softmax(logits):
    """Softmax over the last axis with max-subtraction."""
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax: non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (logits,), backward, "softmax")


def l2_penalty(params):
    """Sum of squared entries over weight tensors (ndim >= 2); biases are skipped."""
    weights = [p for p in params if p.ndim >= 2]
    if not weights:
        return Tensor(0.0)
    value = sum(float(np.sum(np.square(p.data, dtype=np.float64))) for p in weights)
    dtype = weights[0].dtype

    def backward(g):
        return tuple(2.0 * g * p.data for p in weights)

    return Tensor._from_op(np.asarray(value, dtype=dtype), weights, backward, "l2_penalty")


def cross_entropy_with_l2(probs, target, params=(), l2=0.0):
    """Mean negative log-likelihood of ``target`` plus ``l2 * sum(W**2)``.

    ``probs`` is a softmax output of shape (C,) or (B, C); ``target`` a class
    index or a length-B sequence of indices.  The log is clamped at 1e-12.
    """
    pd = probs.data
    single = pd.ndim == 1
    p2 = pd[None] if single else pd
    b, c = p2.shape
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (b,) or not np.issubdtype(t.dtype, np.integer):
        raise InputError(f"target must be {b} integer class index(es), got {target!r}")
    if np.any(t < 0) or np.any(t >= c):
        raise InputError(f"target class out of range [0, {c}): {target!r}")
    rows = np.arange(b)
    pt = p2[rows, t]
    clamped = np.maximum(pt, LOG_CLAMP)
    loss = np.asarray(-np.log(clamped).mean(), dtype=pd.dtype)

    def backward(g):
        d = np.zeros_like(p2)
        d[rows, t] = np.where(pt >= LOG_CLAMP, -1.0 / clamped, 0.0) * (g / b)
        return (d[0] if single else d,)

    ce = Tensor._from_op(loss, (probs,), backward, "cross_entropy")
    if l2 == 0.0:
        return ce
    if l2 < 0:
        raise ConfigError("l2 coefficient must be >= 0")
    return ce + l2_penalty(params) * l2


def dropout_apply(x, ratio, mode="train", rng=None):
    """Inverted dropout: zero with probability ``ratio``, scale survivors by 1/(1-ratio)."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode == "eval" or ratio == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= ratio).astype(x.dtype) / x.dtype.type(1.0 - ratio)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def sigmoid(z):
    """Numerically stable logistic function on plain arrays."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


__all__ = [
    "check_finite",
    "conv2d",
    "cross_entropy_with_l2",
    "dense",
    "dropout_apply",
    "global_avg_pool",
    "l2_penalty",
    "maxpool2",
    "relu",
    "sigmoid",
    "softmax",
]

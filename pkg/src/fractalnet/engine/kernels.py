"""Differentiable kernels.

Each forward returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and the cache.  Activations are ``(N, C, H, W)`` numpy
arrays; kernels never modify their inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """A caller broke a precondition the sampler or executor is meant to guarantee."""


class UninitializedStatsError(RuntimeError):
    pass


# -- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patches as rows ``(N*H*W, k*k*C)``, channel fastest."""
    n, c, h, w = x.shape
    p = k // 2
    xt = x.transpose(0, 2, 3, 1)
    if p:
        xt = np.pad(xt, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xt[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def conv2d(x: np.ndarray, filters: np.ndarray):
    """Stride-1, zero same-padded convolution without bias (patch gather + matmul)."""
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and filters, got {x.shape}, {filters.shape}")
    cout, cin, kh, kw = filters.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {cin}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"unsupported kernel {kh}x{kw}")
    n, _, h, w = x.shape
    cols = _im2col(x, kh)
    out = cols @ filters.transpose(0, 2, 3, 1).reshape(cout, -1).T
    return out.reshape(n, h, w, cout).transpose(0, 3, 1, 2), (cols, filters)


def conv2d_backward(dout: np.ndarray, cache):
    """Input gradient is the same-padded correlation with flipped, transposed filters."""
    cols, filters = cache
    cout, cin, k, _ = filters.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
    flipped = filters.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    dx, _ = conv2d(dout, flipped)
    return dx, np.ascontiguousarray(dw)


# -- batch norm ----------------------------------------------------------------

def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, mode: str = "train",
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
              eps: float = BN_EPS):
    """Per-channel normalization over batch and spatial axes.

    In train mode the batch statistics are returned in the cache (``cache[-1]``
    holds ``(mean, var)``) so the caller can fold them into running averages.
    Eval mode reads only the running statistics.
    """
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise UninitializedStatsError("batch norm evaluated before any training update")
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (mode, xhat, inv_std, gamma, (mean, var))


def batchnorm_backward(dout: np.ndarray, cache):
    mode, xhat, inv_std, gamma, _ = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def update_running(running_mean: np.ndarray, running_var: np.ndarray, batch_mean: np.ndarray,
                   batch_var: np.ndarray, count: int, momentum: float = BN_MOMENTUM):
    """Exponential moving average; the batch variance gets the m/(m-1) correction."""
    unbiased = batch_var * (count / max(count - 1, 1))
    return (momentum * running_mean + (1 - momentum) * batch_mean,
            momentum * running_var + (1 - momentum) * unbiased)


# -- pointwise / pooling / dense ------------------------------------------------

def relu(x: np.ndarray):
    mask = x > 0
    # NaN fails both comparisons and passes through, so it cannot be hidden
    return np.where(x <= 0, x.dtype.type(0), x), mask


def relu_backward(dout: np.ndarray, mask):
    return dout * mask


def maxpool2x2(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x2_backward(dout: np.ndarray, cache):
    idx, shape = cache
    n, c, h, w = shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx, dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """``x @ weights + bias`` with ``weights`` shaped (in_features, out_features)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weights {weights.shape}")
    return x @ weights + bias, (x, weights)


def dense_backward(dout: np.ndarray, cache):
    x, weights = cache
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str = "train"):
    """Inverted dropout; rate 0 and eval mode are the identity and draw nothing."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * keep * scale, keep * scale


def dropout_backward(dout: np.ndarray, cache):
    return dout if cache is None else dout * cache


# -- join ----------------------------------------------------------------------

def masked_mean_join(inputs: Sequence[np.ndarray], active: Sequence[bool] | None = None):
    """Element-wise mean over the active inputs only."""
    if active is None:
        active = [True] * len(inputs)
    if len(active) != len(inputs):
        raise ShapeError("activity vector length differs from input count")
    chosen = [i for i, on in enumerate(active) if on]
    if not chosen:
        raise ContractViolation("join called with no active input")
    shape = inputs[chosen[0]].shape
    if any(inputs[i].shape != shape for i in chosen):
        raise ShapeError("join inputs differ in shape")
    if len(chosen) == 1:
        return inputs[chosen[0]], (chosen, len(inputs))
    acc = inputs[chosen[0]] + inputs[chosen[1]]
    for i in chosen[2:]:
        acc = acc + inputs[i]
    return acc / len(chosen), (chosen, len(inputs))


def masked_mean_join_backward(dout: np.ndarray, cache) -> list[np.ndarray | None]:
    """Gradient per input; inactive inputs get ``None``."""
    chosen, k = cache
    share = dout if len(chosen) == 1 else dout / len(chosen)
    return [share if i in chosen else None for i in range(k)]


# -- loss ----------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()
    return loss, (np.exp(logp), labels)


def softmax_cross_entropy_backward(cache, dloss: float = 1.0):
    probs, labels = cache
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad * (dloss / n)

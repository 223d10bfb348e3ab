"""Central finite-difference gradient checks (float64 only)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from ..topology import assemble_network
from . import kernels as K
from .executor import backward, forward
from .params import init_params

Arrays = dict[str, np.ndarray]


def numeric_gradient(f: Callable[[], float], arrays: Arrays, h: float = 1e-6) -> Arrays:
    """Central differences of ``f`` w.r.t. each entry of ``arrays``, perturbed in place.

    The step for entry ``x`` is ``h * max(1, |x|)``.
    """
    out = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checks need float64, {name} is {arr.dtype}")
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def max_relative_error(analytic: Arrays, numeric: Arrays, eps: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|, eps) over every entry."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), eps)
        if a.size:
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def grad_check(f: Callable[[], float], arrays: Arrays, analytic: Arrays,
               h: float = 1e-6, eps: float = 1e-7) -> float:
    return max_relative_error(analytic, numeric_gradient(f, arrays, h), eps)


# -- built-in suite ------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _probe(out: np.ndarray, rng: np.random.Generator):
    """Random linear functional of a kernel output; returns (weights, scalar fn)."""
    r = rng.standard_normal(out.shape)
    return r, lambda y: float((y * r).sum())


def _case_conv(seed: int, k: int = 3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, k, k))
    y, cache = K.conv2d(x, w)
    r, L = _probe(y, rng)
    dx, dw = K.conv2d_backward(r, cache)
    arrays = {"x": x, "w": w}
    return (lambda: L(K.conv2d(x, w)[0])), arrays, {"x": dx, "w": dw}, 1e-3


def _case_batchnorm(seed: int, mode: str = "train"):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4, 4)) * 2 + 0.5
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    y, cache = K.batchnorm(x, gamma, beta, mode, rm, rv)
    r, L = _probe(y, rng)
    dx, dg, db = K.batchnorm_backward(r, cache)
    arrays = {"x": x, "gamma": gamma, "beta": beta}
    return (lambda: L(K.batchnorm(x, gamma, beta, mode, rm, rv)[0])), arrays, \
        {"x": dx, "gamma": dg, "beta": db}, 1e-6


def _case_relu(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    y, cache = K.relu(x)
    r, L = _probe(y, rng)
    return (lambda: L(K.relu(x)[0])), {"x": x}, {"x": K.relu_backward(r, cache)}, 1e-6


def _case_maxpool(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 6))
    y, cache = K.maxpool2x2(x)
    r, L = _probe(y, rng)
    return (lambda: L(K.maxpool2x2(x)[0])), {"x": x}, {"x": K.maxpool2x2_backward(r, cache)}, 1e-6


def _case_dense(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    y, cache = K.dense(x, w, b)
    r, L = _probe(y, rng)
    dx, dw, db = K.dense_backward(r, cache)
    return (lambda: L(K.dense(x, w, b)[0])), {"x": x, "w": w, "b": b}, \
        {"x": dx, "w": dw, "b": db}, 1e-3


def _case_dropout(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4, 4))
    y, cache = K.dropout(x, 0.3, np.random.default_rng(seed + 1))
    r, L = _probe(y, rng)
    # a fresh generator per call reproduces the same Bernoulli mask
    return (lambda: L(K.dropout(x, 0.3, np.random.default_rng(seed + 1))[0])), {"x": x}, \
        {"x": K.dropout_backward(r, cache)}, 1e-3


def _case_join(seed: int):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    xs = [rng.standard_normal((2, 3, 4, 4)) for _ in range(k)]
    active = rng.random(k) < 0.5
    active[rng.integers(k)] = True
    y, cache = K.masked_mean_join(xs, active)
    # unit probe: the exact gradient is 1/|A| on active inputs, 0 elsewhere
    r = np.ones_like(y)

    def L(out):
        return float(out.sum())

    grads = K.masked_mean_join_backward(r, cache)
    analytic = {f"x{i}": (np.zeros_like(xs[i]) if g is None else g) for i, g in enumerate(grads)}
    return (lambda: L(K.masked_mean_join(xs, active)[0])), \
        {f"x{i}": x for i, x in enumerate(xs)}, analytic, 1e-3


def _case_softmax_xent(seed: int):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((8, 4)) * 2
    labels = rng.integers(0, 4, 8)
    _, cache = K.softmax_cross_entropy(logits, labels)
    grad = K.softmax_cross_entropy_backward(cache)
    return (lambda: float(K.softmax_cross_entropy(logits, labels)[0])), {"logits": logits}, \
        {"logits": grad}, 1e-6


def _conv_unit(x, w, gamma, beta):
    y, c1 = K.conv2d(x, w)
    y, c2 = K.batchnorm(y, gamma, beta, "train")
    y, c3 = K.relu(y)
    return y, (c1, c2, c3)


def _case_conv_bn_relu(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3) * 0.1
    y, (c1, c2, c3) = _conv_unit(x, w, gamma, beta)
    r, L = _probe(y, rng)
    g = K.relu_backward(r, c3)
    g, dg, db = K.batchnorm_backward(g, c2)
    dx, dw = K.conv2d_backward(g, c1)
    return (lambda: L(_conv_unit(x, w, gamma, beta)[0])), \
        {"x": x, "w": w, "gamma": gamma, "beta": beta}, \
        {"x": dx, "w": dw, "gamma": dg, "beta": db}, 1e-6


def network_case(seed: int, masked: bool = True, dropout_rate: float = 0.2):
    """End-to-end loss of a C=2, B=1 network on 8x8 inputs (float64).

    With ``masked`` the join gets a random activity vector; dropout masks are
    regenerated from a fixed seed on every evaluation.
    """
    rng = np.random.default_rng(seed)
    net = assemble_network(2, 1, (3,), 3, pool_flip=True, input_channels=2, input_size=8)
    store = init_params(net, rng, "f64")
    for name, v in store.params.items():
        if not name.endswith(".w"):
            v += rng.standard_normal(v.shape) * 0.1
    x = rng.standard_normal((4, 2, 8, 8))
    labels = rng.integers(0, 3, 4)
    mask = None
    if masked:
        j = net.joins[0]
        act = rng.random(len(j.columns)) < 0.5
        act[rng.integers(len(act))] = True
        mask = {j.id: tuple(bool(a) for a in act)}
    drop = (dropout_rate,)

    def loss() -> float:
        acts = forward(net, store, x, labels, mask, "train", drop, np.random.default_rng(seed + 7))
        return acts.loss

    acts = forward(net, store, x, labels, mask, "train", drop, np.random.default_rng(seed + 7))
    grads = backward(net, store, acts)
    return loss, store.params, grads, 1e-6


KERNEL_CASES: dict[str, Callable] = {
    "conv2d_3x3": _case_conv,
    "conv2d_1x1": lambda s: _case_conv(s, k=1),
    "batchnorm_train": _case_batchnorm,
    "batchnorm_eval": lambda s: _case_batchnorm(s, "eval"),
    "relu": _case_relu,
    "maxpool2x2": _case_maxpool,
    "dense": _case_dense,
    "dropout": _case_dropout,
    "masked_mean_join": _case_join,
    "softmax_cross_entropy": _case_softmax_xent,
    "conv_bn_relu": _case_conv_bn_relu,
    "network_c2b1": network_case,
    "network_c2b1_full": lambda s: network_case(s, masked=False, dropout_rate=0.0),
}


def run_case(name: str, seed: int, tolerance: float = 1e-4) -> CheckResult:
    f, arrays, analytic, h = KERNEL_CASES[name](seed)
    return CheckResult(name, seed, grad_check(f, arrays, analytic, h), tolerance)


def run_suite(seeds: Iterable[int] = range(20), tolerance: float = 1e-4,
              names: Iterable[str] | None = None) -> list[CheckResult]:
    seeds = list(seeds)
    return [run_case(n, s, tolerance) for n in (names or KERNEL_CASES) for s in seeds]

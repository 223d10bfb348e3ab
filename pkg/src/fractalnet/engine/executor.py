"""Forward and reverse-mode execution over a fractal topology.

Only nodes on an active source-to-sink path (under the given join mask) are
evaluated.  Gradients for parameters outside that subgraph are returned as
zeros.  Everything runs on the full batch in one worker, so reduction order
is fixed and results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ..topology import ConvUnit, FractalTopology, Head, Input, Join, Pool, active_subgraph
from . import kernels as K
from .params import ParameterStore


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced inside a kernel."""


def _activity(mask: Any) -> Mapping[str, Sequence[bool]] | None:
    if mask is None:
        return None
    if isinstance(mask, Mapping):
        return mask
    return mask.active


@dataclass
class Activations:
    logits: np.ndarray
    live: frozenset[str]
    caches: dict[str, Any]
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)
    loss: float | None = None
    loss_cache: Any = None


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced at {name}")
    return arr


@np.errstate(over="ignore", invalid="ignore")  # finiteness is checked per node
def forward(net: FractalTopology, store: ParameterStore, x: np.ndarray,
            labels: np.ndarray | None = None, mask: Any = None, mode: str = "train",
            dropout: Sequence[float] | None = None,
            rng: np.random.Generator | None = None) -> Activations:
    """Run the network on a batch.

    ``mask`` is ``None`` (all joins fully active), a PathMask, or a mapping
    join id -> activity vector.  ``dropout`` gives one rate per block and is
    applied after each conv unit's ReLU in train mode; it needs ``rng``.
    """
    activity = _activity(mask)
    live = active_subgraph(net, activity)
    if net.sink not in live:
        raise K.ContractViolation("mask leaves no input-to-output path")
    if dropout is not None and any(dropout) and mode == "train" and rng is None:
        raise ValueError("dropout in train mode needs a random generator")

    p = store.params
    out: dict[str, np.ndarray] = {}
    caches: dict[str, Any] = {}
    stats: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}
    for n in net.nodes:
        nid = n.id
        if nid not in live:
            continue
        srcs = net.inputs.get(nid, ())
        if isinstance(n, Input):
            if x.shape[1:] != (n.channels, n.size, n.size) and n.size:
                raise K.ShapeError(f"input batch {x.shape} does not match {n.channels}x{n.size}x{n.size}")
            out[nid] = _finite(nid, x)
            continue
        if isinstance(n, ConvUnit):
            h, c_conv = K.conv2d(out[srcs[0]], p[f"{nid}.w"])
            rm, rv = store.running_stats(nid) if mode == "eval" else (None, None)
            h, c_bn = K.batchnorm(h, p[f"{nid}.gamma"], p[f"{nid}.beta"], mode, rm, rv)
            if mode == "train":
                mean, var = c_bn[-1]
                stats[nid] = (mean, var, h.shape[0] * h.shape[2] * h.shape[3])
            h, c_relu = K.relu(h)
            rate = dropout[n.block - 1] if dropout is not None else 0.0
            h, c_drop = K.dropout(h, rate, rng, mode)
            caches[nid] = (c_conv, c_bn, c_relu, c_drop)
        elif isinstance(n, Join):
            act = activity.get(nid) if activity is not None else None
            if act is None:
                act = [True] * len(srcs)
            if any(on and s not in live for s, on in zip(srcs, act)):
                raise K.ContractViolation(f"active input of {nid} is disconnected")
            feeds = [out.get(s) for s in srcs]
            h, caches[nid] = K.masked_mean_join(feeds, act)
        elif isinstance(n, Pool):
            h, caches[nid] = K.maxpool2x2(out[srcs[0]])
        elif isinstance(n, Head):
            a = out[srcs[0]]
            flat = a.reshape(a.shape[0], -1)
            h, c_dense = K.dense(flat, p["head.w"], p["head.b"])
            caches[nid] = (c_dense, a.shape)
        else:  # pragma: no cover
            raise TypeError(f"unknown node {n!r}")
        out[nid] = _finite(nid, h)

    acts = Activations(out[net.sink], live, caches, stats)
    if labels is not None:
        loss, acts.loss_cache = K.softmax_cross_entropy(acts.logits, labels)
        acts.loss = float(_finite("loss", np.asarray(loss)))
    return acts


@np.errstate(over="ignore", invalid="ignore")
def backward(net: FractalTopology, store: ParameterStore, acts: Activations,
             labels: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradient of the mean cross-entropy with respect to every parameter."""
    if acts.loss_cache is None:
        if labels is None:
            raise ValueError("backward needs labels or a forward pass run with labels")
        _, acts.loss_cache = K.softmax_cross_entropy(acts.logits, labels)
    grads = {k: np.zeros_like(v) for k, v in store.params.items()}
    adj: dict[str, np.ndarray] = {net.sink: K.softmax_cross_entropy_backward(acts.loss_cache)}

    def push(src: str, g: np.ndarray) -> None:
        if src in adj:
            adj[src] = adj[src] + g
        else:
            adj[src] = g

    for n in reversed(net.nodes):
        nid = n.id
        if nid not in acts.live or nid not in adj or isinstance(n, Input):
            continue
        g = adj.pop(nid)
        srcs = net.inputs[nid]
        if isinstance(n, Head):
            c_dense, shape = acts.caches[nid]
            dx, grads["head.w"], grads["head.b"] = K.dense_backward(g, c_dense)
            push(srcs[0], dx.reshape(shape))
        elif isinstance(n, Pool):
            push(srcs[0], K.maxpool2x2_backward(g, acts.caches[nid]))
        elif isinstance(n, Join):
            for s, gs in zip(srcs, K.masked_mean_join_backward(g, acts.caches[nid])):
                if gs is not None:
                    push(s, gs)
        elif isinstance(n, ConvUnit):
            c_conv, c_bn, c_relu, c_drop = acts.caches[nid]
            g = K.dropout_backward(g, c_drop)
            g = K.relu_backward(g, c_relu)
            g, grads[f"{nid}.gamma"], grads[f"{nid}.beta"] = K.batchnorm_backward(g, c_bn)
            dx, grads[f"{nid}.w"] = K.conv2d_backward(g, c_conv)
            push(srcs[0], dx)
    for k, v in grads.items():
        _finite(k, v)
    return grads


def update_running_stats(store: ParameterStore, acts: Activations,
                         momentum: float = K.BN_MOMENTUM) -> None:
    """Fold a train-mode pass's batch statistics into the store's running averages (in place)."""
    for nid, (mean, var, count) in acts.batch_stats.items():
        rm, rv = K.update_running(store.buffers[f"{nid}.running_mean"],
                                  store.buffers[f"{nid}.running_var"], mean, var, count, momentum)
        store.buffers[f"{nid}.running_mean"] = rm.astype(store.dtype, copy=False)
        store.buffers[f"{nid}.running_var"] = rv.astype(store.dtype, copy=False)
        store.buffers[f"{nid}.bn_updates"] = store.buffers[f"{nid}.bn_updates"] + 1

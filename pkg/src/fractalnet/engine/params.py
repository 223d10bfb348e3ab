"""Parameter storage and initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..topology import ConvUnit, FractalTopology, Head

DTYPES = {"f32": np.float32, "f64": np.float64}


def param_shapes(net: FractalTopology) -> dict[str, tuple[int, ...]]:
    """Learnable tensors of ``net`` in node order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for n in net.nodes:
        if isinstance(n, ConvUnit):
            shapes[f"{n.id}.w"] = (n.out_channels, n.in_channels, n.kernel, n.kernel)
            shapes[f"{n.id}.gamma"] = (n.out_channels,)
            shapes[f"{n.id}.beta"] = (n.out_channels,)
        elif isinstance(n, Head):
            shapes["head.w"] = (n.in_features, n.num_classes)
            shapes["head.b"] = (n.num_classes,)
    return shapes


def buffer_shapes(net: FractalTopology) -> dict[str, tuple[int, ...]]:
    """Batch-norm running statistics plus a per-unit update counter."""
    shapes: dict[str, tuple[int, ...]] = {}
    for n in net.convs:
        shapes[f"{n.id}.running_mean"] = (n.out_channels,)
        shapes[f"{n.id}.running_var"] = (n.out_channels,)
        shapes[f"{n.id}.bn_updates"] = (1,)
    return shapes


@dataclass
class ParameterStore:
    """Learnable tensors, BN buffers and SGD velocity, all keyed by ``<node id>.<name>``."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def running_stats(self, unit_id: str) -> tuple[np.ndarray | None, np.ndarray | None]:
        if self.buffers[f"{unit_id}.bn_updates"][0] == 0:
            return None, None
        return self.buffers[f"{unit_id}.running_mean"], self.buffers[f"{unit_id}.running_var"]

    def transplant(self, net: FractalTopology) -> "ParameterStore":
        """Copy of the entries ``net`` needs (e.g. a column view of the trained network)."""
        names = param_shapes(net)
        bufs = buffer_shapes(net)
        missing = [k for k in names if k not in self.params] + [k for k in bufs if k not in self.buffers]
        if missing:
            raise KeyError(f"store lacks tensors for {missing[:3]}")
        return ParameterStore(
            {k: self.params[k].copy() for k in names},
            {k: self.buffers[k].copy() for k in bufs},
            {k: self.velocity[k].copy() for k in names if k in self.velocity},
        )

    def equal(self, other: "ParameterStore") -> bool:
        """Bit-exact equality of all tensors."""
        def same(a: dict, b: dict) -> bool:
            return a.keys() == b.keys() and all(
                a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
                and a[k].tobytes() == b[k].tobytes() for k in a)
        return same(self.params, other.params) and same(self.buffers, other.buffers) \
            and same(self.velocity, other.velocity)


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    """Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_in, fan_out = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_params(net: FractalTopology, rng: np.random.Generator, precision: str = "f32") -> ParameterStore:
    """Xavier filters and dense weights, unit BN scale, zero shifts and biases, zero velocity."""
    dtype = DTYPES[precision]
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(net).items():
        if name.endswith(".w"):
            params[name] = xavier_uniform(shape, rng, dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    buffers = {}
    for name, shape in buffer_shapes(net).items():
        fill = 1.0 if name.endswith("running_var") else 0.0
        buffers[name] = np.full(shape, fill, dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return ParameterStore(params, buffers, velocity)

"""Drop-path mask sampling.

A :class:`PathMask` records, for every join, which of its inputs (ordered by
column) are active.  Local sampling drops each join input independently and
reinstates one uniformly chosen input when a join would lose all of them.
Global sampling keeps a single column across the whole network.

All samplers take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .topology import ConvUnit, FractalTopology, active_subgraph


@dataclass(frozen=True)
class PathMask:
    kind: str  # "full", "local" or "global"
    active: Mapping[str, tuple[bool, ...]]
    column: int | None = None

    def inactive_fraction(self) -> float:
        """Share of join inputs switched off (after reinstatement)."""
        total = sum(len(v) for v in self.active.values())
        if not total:
            return 0.0
        return sum(v.count(False) for v in self.active.values()) / total

    def dump(self, net: FractalTopology) -> str:
        """One ``block.row: bits`` line per join, bits ordered by participant column."""
        lines = []
        for j in net.joins:
            bits = "".join("1" if on else "0" for on in self.active[j.id])
            lines.append(f"{j.block}.{j.row}: {bits}")
        return "\n".join(lines) + ("\n" if lines else "")


def full_mask(net: FractalTopology) -> PathMask:
    return PathMask("full", {j.id: (True,) * len(j.columns) for j in net.joins})


def global_mask(net: FractalTopology, column: int) -> PathMask:
    """Only ``column`` feeds each join it takes part in.

    Joins the column does not reach lie inside one of its conv spans and are
    never on the active path; they keep all inputs so no join is ever empty.
    """
    if not 1 <= column <= net.columns:
        raise ValueError(f"column {column} out of range 1..{net.columns}")
    active = {}
    for j in net.joins:
        if column in j.columns:
            active[j.id] = tuple(c == column for c in j.columns)
        else:
            active[j.id] = (True,) * len(j.columns)
    return PathMask("global", active, column)


def sample_join_activity(sizes: Sequence[int], drop_rate: float, rng: np.random.Generator,
                         n: int = 1) -> list[np.ndarray]:
    """``n`` independent local draws for joins with the given input counts.

    Returns one ``(n, k)`` boolean array per join.  Each input is dropped with
    probability ``drop_rate``; if a join drops everything, one input chosen
    uniformly at random is switched back on.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {drop_rate}")
    sizes = list(sizes)
    total = sum(sizes)
    keep = rng.random((n, total)) >= drop_rate
    pick = rng.random((n, len(sizes)))
    out = []
    off = 0
    for j, k in enumerate(sizes):
        block = keep[:, off:off + k]
        dead = ~block.any(axis=1)
        if dead.any():
            idx = np.minimum((pick[dead, j] * k).astype(np.int64), k - 1)
            block[np.flatnonzero(dead), idx] = True
        out.append(block)
        off += k
    return out


def sample_local(net: FractalTopology, drop_rate: float, rng: np.random.Generator) -> PathMask:
    joins = net.joins
    draws = sample_join_activity([len(j.columns) for j in joins], drop_rate, rng)
    return PathMask("local", {j.id: tuple(bool(b) for b in d[0]) for j, d in zip(joins, draws)})


def sample_global(net: FractalTopology, rng: np.random.Generator) -> PathMask:
    """Uniformly chosen single column."""
    return global_mask(net, int(rng.integers(1, net.columns + 1)))


def sample_mixed(net: FractalTopology, rng: np.random.Generator, local_fraction: float = 0.5,
                 drop_rate: float = 0.15) -> PathMask:
    """Local sample with probability ``local_fraction``, otherwise a global one."""
    if not 0.0 <= local_fraction <= 1.0:
        raise ValueError(f"local fraction must be in [0, 1], got {local_fraction}")
    if rng.random() < local_fraction:
        return sample_local(net, drop_rate, rng)
    return sample_global(net, rng)


def simultaneous_samples(net: FractalTopology, rng: np.random.Generator,
                         drop_rate: float = 0.15) -> list[PathMask]:
    """One local sample followed by the global mask of every column."""
    return [sample_local(net, drop_rate, rng)] + [global_mask(net, c) for c in range(1, net.columns + 1)]


def live_nodes(net: FractalTopology, mask: PathMask | None) -> frozenset[str]:
    return active_subgraph(net, None if mask is None else mask.active)


def is_connected(net: FractalTopology, mask: PathMask) -> bool:
    """The masked graph still links the input to the head."""
    live = live_nodes(net, mask)
    return net.source in live and net.sink in live


def mask_depth(net: FractalTopology, mask: PathMask | None) -> int:
    """Conv units on the longest active path."""
    return net.depth(live_nodes(net, mask))


def active_columns(net: FractalTopology, mask: PathMask) -> set[int]:
    """Columns owning at least one conv unit on an active path."""
    live = live_nodes(net, mask)
    return {n.column for n in net.nodes if isinstance(n, ConvUnit) and n.id in live}


def check_mask(net: FractalTopology, mask: PathMask) -> None:
    """Raise ``ValueError`` unless the mask covers every join, keeps one input per join, and connects."""
    for j in net.joins:
        act = mask.active.get(j.id)
        if act is None or len(act) != len(j.columns):
            raise ValueError(f"mask lacks a valid activity vector for {j.id}")
        if not any(act):
            raise ValueError(f"join {j.id} has no active input")
    if not is_connected(net, mask):
        raise ValueError("mask disconnects input from output")


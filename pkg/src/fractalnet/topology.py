"""Fractal block and network DAGs.

Blocks are laid out on a row grid: a block with ``C`` columns has
``2**(C-1)`` rows, column ``c`` (1 = shallowest) owns a conv unit ending at
every row that is a multiple of ``2**(C-c)``, and a join sits on every even
row, merging columns ``C - v2(row) .. C``.  The literal recursive expansion
is kept in :func:`recursive_block_graph` and only used as an oracle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

MAX_COLUMNS = 12


class TopologyError(ValueError):
    """Invalid architecture argument."""


@dataclass(frozen=True)
class Input:
    channels: int
    size: int

    @property
    def id(self) -> str:
        return "input"


@dataclass(frozen=True)
class ConvUnit:
    block: int
    column: int
    row: int
    in_channels: int
    out_channels: int
    kernel: int = 3

    @property
    def id(self) -> str:
        return f"b{self.block}.c{self.column}.r{self.row}"


@dataclass(frozen=True)
class Join:
    block: int
    row: int
    columns: tuple[int, ...]

    @property
    def id(self) -> str:
        return f"b{self.block}.j{self.row}"


@dataclass(frozen=True)
class Pool:
    block: int
    column: int | None = None

    @property
    def id(self) -> str:
        if self.column is None:
            return f"b{self.block}.pool"
        return f"b{self.block}.c{self.column}.pool"


@dataclass(frozen=True)
class Head:
    in_features: int
    num_classes: int

    @property
    def id(self) -> str:
        return "head"


Node = Input | ConvUnit | Join | Pool | Head


def v2(n: int) -> int:
    """2-adic valuation of a positive integer."""
    return (n & -n).bit_length() - 1


@dataclass(frozen=True)
class FractalTopology:
    """Immutable layer DAG.

    ``nodes`` is stored in a topological order; ``inputs`` maps a node id to
    the ordered ids feeding it (join inputs are ordered by column).
    ``column`` is set when the topology is a single extracted column.
    """

    columns: int
    blocks: int
    channel_plan: tuple[int, ...]
    num_classes: int
    input_channels: int
    input_size: int
    pool_flip: bool
    nodes: tuple[Node, ...]
    inputs: Mapping[str, tuple[str, ...]] = field(repr=False)
    column: int | None = None

    @cached_property
    def by_id(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def consumers(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in self.inputs.get(n.id, ()):
                out[src].append(n.id)
        return {k: tuple(v) for k, v in out.items()}

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.id) for n in self.nodes for src in self.inputs.get(n.id, ())]

    @property
    def source(self) -> str:
        return self.nodes[0].id

    @property
    def sink(self) -> str:
        return self.nodes[-1].id

    @property
    def convs(self) -> list[ConvUnit]:
        return [n for n in self.nodes if isinstance(n, ConvUnit)]

    @property
    def joins(self) -> list[Join]:
        return [n for n in self.nodes if isinstance(n, Join)]

    @property
    def head(self) -> Head | None:
        last = self.nodes[-1]
        return last if isinstance(last, Head) else None

    def resolution(self, block: int) -> int:
        """Spatial extent seen by conv units of ``block``."""
        return self.input_size >> (block - 1)

    def depth(self, live: Iterable[str] | None = None) -> int:
        """Conv units on the longest source-to-sink path (optionally over a subgraph)."""
        allowed = None if live is None else set(live)
        best: dict[str, int] = {}
        for n in self.nodes:
            if allowed is not None and n.id not in allowed:
                continue
            preds = [best[s] for s in self.inputs.get(n.id, ()) if s in best]
            base = max(preds) if preds else 0
            best[n.id] = base + (1 if isinstance(n, ConvUnit) else 0)
        return best.get(self.sink, 0)

    def dump(self) -> str:
        """Deterministic text rendering: header, node list, edge list."""
        lines = [
            f"fractal columns={self.columns} blocks={self.blocks} "
            f"channels={','.join(map(str, self.channel_plan))} classes={self.num_classes} "
            f"input={self.input_channels}x{self.input_size}x{self.input_size} "
            f"pool_flip={int(self.pool_flip)} view={self.column if self.column else 'full'}",
            "nodes:",
        ]
        for n in self.nodes:
            if isinstance(n, ConvUnit):
                desc = f"conv {n.in_channels}->{n.out_channels} k{n.kernel}"
            elif isinstance(n, Join):
                desc = "join " + ",".join(map(str, n.columns))
            elif isinstance(n, Pool):
                desc = "maxpool2x2"
            elif isinstance(n, Head):
                desc = f"dense {n.in_features}->{n.num_classes} softmax"
            else:
                desc = f"input {n.channels}x{n.size}x{n.size}"
            lines.append(f"  {n.id} {desc}")
        lines.append("edges:")
        lines.extend(f"  {a} -> {b}" for a, b in self.edges)
        return "\n".join(lines) + "\n"

    @cached_property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.dump().encode()).digest()


def _check_columns(C: int) -> None:
    if not isinstance(C, int) or C < 1 or C > MAX_COLUMNS:
        raise TopologyError(f"column count must be in [1, {MAX_COLUMNS}], got {C!r}")


def _block(b: int, C: int, c_in: int, ch: int, src: str, pool_flip: bool,
           with_pool: bool) -> tuple[list[Node], dict[str, tuple[str, ...]], str]:
    """Closed-form layout of block ``b``; returns nodes, their inputs, and the output id."""
    rows = 1 << (C - 1)
    nodes: list[Node] = []
    inputs: dict[str, tuple[str, ...]] = {}
    state: dict[int, str] = {0: src}
    conv_at: dict[tuple[int, int], ConvUnit] = {}

    for r in range(1, rows + 1):
        ending = [c for c in range(1, C + 1) if r % (1 << (C - c)) == 0]
        for c in ending:
            prev = r - (1 << (C - c))
            unit = ConvUnit(b, c, r, c_in if prev == 0 else ch, ch)
            nodes.append(unit)
            inputs[unit.id] = (state[prev],)
            conv_at[c, r] = unit
        last = r == rows
        if len(ending) == 1:
            state[r] = conv_at[ending[0], r].id
            continue
        feeds = [conv_at[c, r].id for c in ending]
        if last and with_pool and pool_flip:
            pools = [Pool(b, c) for c in ending]
            for p, f in zip(pools, feeds):
                nodes.append(p)
                inputs[p.id] = (f,)
            feeds = [p.id for p in pools]
        join = Join(b, r, tuple(ending))
        nodes.append(join)
        inputs[join.id] = tuple(feeds)
        state[r] = join.id

    out = state[rows]
    flipped = C > 1 and pool_flip
    if with_pool and not flipped:
        pool = Pool(b)
        nodes.append(pool)
        inputs[pool.id] = (out,)
        out = pool.id
    return nodes, inputs, out


def expand_block(C: int, channels: int = 1, in_channels: int | None = None) -> FractalTopology:
    """A single collapsed-join fractal block ``f_C`` without pools or head."""
    _check_columns(C)
    c_in = channels if in_channels is None else in_channels
    src = Input(c_in, 0)
    nodes, inputs, _ = _block(1, C, c_in, channels, src.id, pool_flip=False, with_pool=False)
    return FractalTopology(C, 1, (channels,), 0, c_in, 0, False, (src, *nodes), inputs)


def assemble_network(C: int, B: int, channel_plan: Sequence[int], num_classes: int,
                     pool_flip: bool = True, input_channels: int = 3,
                     input_size: int = 32) -> FractalTopology:
    """Stack ``B`` fractal blocks with 2x2 max-pooling after each and a dense softmax head."""
    _check_columns(C)
    plan = tuple(int(x) for x in channel_plan)
    if B < 1:
        raise TopologyError(f"block count must be positive, got {B}")
    if len(plan) != B:
        raise TopologyError(f"channel plan has {len(plan)} entries for {B} blocks")
    if any(ch < 1 for ch in plan):
        raise TopologyError("channel counts must be positive")
    if num_classes < 1:
        raise TopologyError("need at least one class")
    if input_size < 1 or input_size % (1 << B):
        raise TopologyError(f"input size {input_size} not divisible by 2^{B}")

    src = Input(input_channels, input_size)
    nodes: list[Node] = [src]
    inputs: dict[str, tuple[str, ...]] = {}
    out, c_in = src.id, input_channels
    for b, ch in enumerate(plan, start=1):
        bn, bi, out = _block(b, C, c_in, ch, out, pool_flip, with_pool=True)
        nodes += bn
        inputs.update(bi)
        c_in = ch
    final = input_size >> B
    head = Head(plan[-1] * final * final, num_classes)
    nodes.append(head)
    inputs[head.id] = (out,)
    return FractalTopology(C, B, plan, num_classes, input_channels, input_size,
                           pool_flip, tuple(nodes), inputs)


def column_view(net: FractalTopology, c: int) -> FractalTopology:
    """Plain chain holding only column ``c``'s conv units, one pool per block, and the head.

    Node ids match the full network so parameters transplant by name.
    """
    if net.column is not None:
        raise TopologyError("topology is already a single column")
    if not 1 <= c <= net.columns:
        raise TopologyError(f"column {c} out of range 1..{net.columns}")
    src = net.nodes[0]
    nodes: list[Node] = [src]
    inputs: dict[str, tuple[str, ...]] = {}
    prev = src.id
    for b in range(1, net.blocks + 1):
        for n in net.convs:
            if n.block == b and n.column == c:
                nodes.append(n)
                inputs[n.id] = (prev,)
                prev = n.id
        if net.head is not None:
            pool = Pool(b, c)
            nodes.append(pool)
            inputs[pool.id] = (prev,)
            prev = pool.id
    if net.head is not None:
        nodes.append(net.head)
        inputs[net.head.id] = (prev,)
    return FractalTopology(net.columns, net.blocks, net.channel_plan, net.num_classes,
                           net.input_channels, net.input_size, net.pool_flip,
                           tuple(nodes), inputs, column=c)


def active_subgraph(net: FractalTopology,
                    activity: Mapping[str, Sequence[bool]] | None = None) -> frozenset[str]:
    """Nodes lying on some source-to-sink path when join inputs are gated by ``activity``.

    Joins missing from ``activity`` keep all inputs.
    """
    reach: set[str] = {net.sink}
    for n in reversed(net.nodes):
        if n.id not in reach:
            continue
        srcs = net.inputs.get(n.id, ())
        if isinstance(n, Join) and activity is not None and n.id in activity:
            srcs = tuple(s for s, on in zip(srcs, activity[n.id]) if on)
        reach.update(srcs)
    if net.source not in reach:
        return frozenset()
    # forward pass: drop nodes not fed from the source (cannot happen for joins
    # with at least one active input, kept for arbitrary activity maps)
    fed: set[str] = {net.source}
    for n in net.nodes[1:]:
        if n.id not in reach:
            continue
        srcs = [s for s in net.inputs.get(n.id, ()) if s in reach]
        if srcs and all(s in fed for s in srcs):
            fed.add(n.id)
    return frozenset(reach & fed)


@dataclass(frozen=True)
class StructuralStats:
    depth: int
    conv_count: int
    join_count: int
    param_count: int
    flop_count: int


def structural_stats(net: FractalTopology) -> StructuralStats:
    """Depth, layer counts, learnable parameter count and multiply-accumulate count.

    Conv units count their filters plus batch-norm scale and shift.  MACs cover
    conv and dense layers at the configured input resolution.
    """
    params = flops = 0
    for n in net.convs:
        k2 = n.kernel * n.kernel
        params += n.in_channels * n.out_channels * k2 + 2 * n.out_channels
        res = net.resolution(n.block)
        flops += res * res * n.in_channels * n.out_channels * k2
    head = net.head
    if head is not None:
        params += head.in_features * head.num_classes + head.num_classes
        flops += head.in_features * head.num_classes
    return StructuralStats(
        depth=net.depth(),
        conv_count=len(net.convs),
        join_count=len(net.joins),
        param_count=params,
        flop_count=flops,
    )


def recursive_block_graph(C: int):
    """Literal recursive expansion ``f_{C+1} = (f_C o f_C) (+) conv`` followed by join collapsing.

    Returns a ``networkx.DiGraph`` whose nodes carry ``kind`` ("input", "conv",
    "join") and, for convs, the ``column`` (1 = shallowest).
    """
    import networkx as nx

    g = nx.DiGraph()
    counter = iter(range(1 << 20))

    def new(kind: str, **attrs) -> int:
        i = next(counter)
        g.add_node(i, kind=kind, **attrs)
        return i

    def frac(c: int, z: int, depth_offset: int) -> int:
        # depth_offset shifts column labels so the outermost conv is column 1
        if c == 1:
            u = new("conv", column=depth_offset + 1)
            g.add_edge(z, u)
            return u
        deep = frac(c - 1, frac(c - 1, z, depth_offset + 1), depth_offset + 1)
        short = new("conv", column=depth_offset + 1)
        g.add_edge(z, short)
        j = new("join")
        g.add_edge(deep, j)
        g.add_edge(short, j)
        return j

    _check_columns(C)
    z = new("input")
    frac(C, z, 0)

    # collapse a join into its consumer join when it feeds nothing else
    changed = True
    while changed:
        changed = False
        for j in list(g.nodes):
            if g.nodes[j]["kind"] != "join":
                continue
            succ = list(g.successors(j))
            if len(succ) == 1 and g.nodes[succ[0]]["kind"] == "join":
                parent = succ[0]
                for p in list(g.predecessors(j)):
                    g.add_edge(p, parent)
                g.remove_node(j)
                changed = True
                break
    return g


def block_graph(net: FractalTopology):
    """The single-block topology as a labelled ``networkx.DiGraph`` (same labelling as the oracle)."""
    import networkx as nx

    g = nx.DiGraph()
    for n in net.nodes:
        if isinstance(n, ConvUnit):
            g.add_node(n.id, kind="conv", column=n.column)
        elif isinstance(n, Join):
            g.add_node(n.id, kind="join")
        elif isinstance(n, Input):
            g.add_node(n.id, kind="input")
        else:
            raise TopologyError(f"unexpected node {n.id} in a bare block")
    g.add_edges_from(net.edges)
    return g


def verify_recursion_equivalence(C: int) -> bool:
    """True iff the closed-form block is isomorphic to the literal recursive expansion."""
    import networkx as nx
    from networkx.algorithms.isomorphism import categorical_node_match

    if not 1 <= C <= 6:
        raise TopologyError("recursion check supports 1 <= C <= 6")
    match = categorical_node_match(["kind", "column"], [None, None])
    return nx.is_isomorphic(recursive_block_graph(C), block_graph(expand_block(C)),
                            node_match=match)

"""Training protocol, evaluation and per-column monitoring."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import droppath
from .dataio import Dataset, augment_batch
from .engine import NonFiniteError, UninitializedStatsError, ParameterStore, backward, forward, init_params, update_running_stats
from .topology import FractalTopology, column_view, structural_stats

BLOCK_DROPOUT = (0.0, 0.1, 0.2, 0.3, 0.4)


def default_dropout(blocks: int) -> tuple[float, ...]:
    """Per-block rates 0%, 10%, ... capped at 40%."""
    return tuple(BLOCK_DROPOUT[min(b, len(BLOCK_DROPOUT) - 1)] for b in range(blocks))


@dataclass
class TrainPlan:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.02
    momentum: float = 0.9
    milestones: tuple[int, ...] | None = None
    droppath: bool = True
    local_drop_rate: float = 0.15
    local_fraction: float = 0.5
    dropout: tuple[float, ...] | None = None
    augment: str = "none"
    seed: int = 0
    precision: str = "f32"
    simultaneous: bool = False
    weight_decay: float = 0.0
    monitor: bool = True
    record_time: bool = True

    def dropout_rates(self, blocks: int) -> tuple[float, ...]:
        rates = default_dropout(blocks) if self.dropout is None else tuple(self.dropout)
        if len(rates) != blocks:
            raise ValueError(f"{len(rates)} dropout rates for {blocks} blocks")
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        return rates

    def validate(self, blocks: int) -> None:
        self.dropout_rates(blocks)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if not 0.0 <= self.local_drop_rate < 1.0:
            raise ValueError("local drop rate must lie in [0, 1)")
        if not 0.0 <= self.local_fraction <= 1.0:
            raise ValueError("local fraction must lie in [0, 1]")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    test_loss: float | None = None
    test_error_pct: float | None = None
    per_column_loss: list[float | None] = field(default_factory=list)
    per_column_error_pct: list[float | None] = field(default_factory=list)
    effective_local_drop_rate: float = 0.0
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class EvalResult:
    loss: float
    error_pct: float


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ParameterStore, records: list[MetricsRecord]):
        super().__init__(message)
        self.last_good = last_good
        self.records = records


def lr_schedule(epoch: int, total_epochs: int, base_lr: float,
                milestones: Sequence[int] | None = None) -> float:
    """Divide by 10 at each milestone reached.

    Default milestones are where the remaining epochs halve: E/2, 3E/4, 7E/8
    and 15E/16 (floored), after which the rate stays constant.
    """
    if milestones is None:
        milestones = {total_epochs * (2 ** i - 1) // 2 ** i for i in range(1, 5)} - {0}
    drops = sum(1 for m in set(milestones) if m <= epoch)
    return base_lr / 10 ** drops


def sgd_momentum_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
                      momentum: float, weight_decay: float = 0.0) -> ParameterStore:
    """``v <- momentum * v + lr * g;  w <- w - v`` for every parameter, in place."""
    for name, w in store.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        if weight_decay:
            g = g + weight_decay * w
        v = store.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = momentum * v + lr * g
        store.velocity[name] = v.astype(w.dtype, copy=False)
        store.params[name] = (w - store.velocity[name]).astype(w.dtype, copy=False)
    return store


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def evaluate(net: FractalTopology, store: ParameterStore, data: Dataset,
             mask: droppath.PathMask | None = None, batch_size: int = 500) -> EvalResult:
    """Eval-mode loss and error (%) over a dataset; no dropout, fixed mask."""
    total_loss = 0.0
    wrong = 0
    for sl in _batches(len(data), batch_size):
        x = data.images[sl].astype(store.dtype)
        y = data.labels[sl]
        acts = forward(net, store, x, y, mask, mode="eval")
        total_loss += acts.loss * len(y)
        wrong += int((acts.logits.argmax(axis=1) != y).sum())
    n = max(len(data), 1)
    return EvalResult(total_loss / n, 100.0 * wrong / n)


def monitor_columns(net: FractalTopology, store: ParameterStore, data: Dataset) -> list[dict]:
    """Evaluation of each column alone (global masks, c = 1..C) followed by the full network."""
    rows = []
    for c in range(1, net.columns + 1):
        r = evaluate(net, store, data, droppath.global_mask(net, c))
        rows.append({"column": c, "loss": r.loss, "error_pct": r.error_pct})
    r = evaluate(net, store, data)
    rows.append({"column": "full", "loss": r.loss, "error_pct": r.error_pct})
    return rows


def anytime_profile(net: FractalTopology, store: ParameterStore, data: Dataset) -> list[dict]:
    """Per-column cost/accuracy table: MACs, wall latency of a full pass, loss and error."""
    rows = []
    for c in range(1, net.columns + 1):
        view = column_view(net, c)
        sub = store.transplant(view)
        start = time.perf_counter()
        r = evaluate(view, sub, data)
        elapsed = time.perf_counter() - start
        rows.append({
            "column": c,
            "depth": structural_stats(view).depth,
            "flops": structural_stats(view).flop_count,
            "wall_latency_s": elapsed,
            "loss": r.loss,
            "error_pct": r.error_pct,
        })
    return rows


def _try_evaluate(net, store, data, mask=None) -> EvalResult | None:
    """``None`` while some unit on the path has never seen a training batch."""
    try:
        return evaluate(net, store, data, mask)
    except UninitializedStatsError:
        return None


def _fill_test_metrics(rec: MetricsRecord, net: FractalTopology, store: ParameterStore,
                       data: Dataset, monitor: bool) -> None:
    if monitor:
        cols = [_try_evaluate(net, store, data, droppath.global_mask(net, c))
                for c in range(1, net.columns + 1)]
        rec.per_column_loss = [None if r is None else r.loss for r in cols]
        rec.per_column_error_pct = [None if r is None else r.error_pct for r in cols]
    r = _try_evaluate(net, store, data)
    if r is not None:
        rec.test_loss, rec.test_error_pct = r.loss, r.error_pct


def _sample_masks(net: FractalTopology, plan: TrainPlan, rng: np.random.Generator):
    if not plan.droppath or net.columns == 1:
        return [None]
    if plan.simultaneous:
        return droppath.simultaneous_samples(net, rng, plan.local_drop_rate)
    return [droppath.sample_mixed(net, rng, plan.local_fraction, plan.local_drop_rate)]


def train(net: FractalTopology, plan: TrainPlan, train_set: Dataset, test_set: Dataset | None = None,
          on_epoch: Callable[[MetricsRecord, ParameterStore], None] | None = None,
          store: ParameterStore | None = None) -> tuple[ParameterStore, list[MetricsRecord]]:
    """Run the full protocol and return the final parameters and one record per epoch.

    Separate random streams (spawned from ``plan.seed``) drive initialization,
    sample order, drop-path masks, dropout and augmentation, so changing one
    feature does not reshuffle the others.
    """
    plan.validate(net.blocks)
    if (train_set.channels, train_set.size) != (net.input_channels, net.input_size):
        raise ValueError("dataset shape does not match the network input")
    rates = plan.dropout_rates(net.blocks)
    init_rng, order_rng, mask_rng, drop_rng, aug_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(plan.seed).spawn(5))
    if store is None:
        store = init_params(net, init_rng, plan.precision)
    records: list[MetricsRecord] = []
    last_good = store.copy()

    for epoch in range(plan.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, plan.epochs, plan.base_lr, plan.milestones)
        order = order_rng.permutation(len(train_set))
        loss_sum, seen = 0.0, 0
        local_rates = []
        try:
            for sl in _batches(len(order), plan.batch_size):
                idx = order[sl]
                x = augment_batch(train_set.images[idx], aug_rng, plan.augment).astype(store.dtype)
                y = train_set.labels[idx]
                masks = _sample_masks(net, plan, mask_rng)
                grads = None
                batch_loss = 0.0
                for m in masks:
                    if m is not None and m.kind == "local":
                        local_rates.append(m.inactive_fraction())
                    acts = forward(net, store, x, y, m, "train", rates, drop_rng)
                    g = backward(net, store, acts)
                    update_running_stats(store, acts)
                    batch_loss += acts.loss
                    grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
                if len(masks) > 1:
                    grads = {k: v / len(masks) for k, v in grads.items()}
                sgd_momentum_step(store, grads, lr, plan.momentum, plan.weight_decay)
                loss_sum += batch_loss / len(masks) * len(y)
                seen += len(y)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, records) from exc

        train_loss = loss_sum / seen
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"epoch {epoch}: non-finite training loss", last_good, records)
        rec = MetricsRecord(epoch, lr, train_loss,
                            effective_local_drop_rate=float(np.mean(local_rates)) if local_rates else 0.0)
        if test_set is not None:
            try:
                _fill_test_metrics(rec, net, store, test_set, plan.monitor)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, records) from exc
        if plan.record_time:
            rec.wall_seconds = time.perf_counter() - start
        records.append(rec)
        last_good = store.copy()
        if on_epoch is not None:
            on_epoch(rec, store)
    return store, records

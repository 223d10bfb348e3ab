"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime or divergence error,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import droppath
from .config import ConfigError, RunConfig, data_shape, load_config, parse_idx, parse_synth, plan_for
from .dataio import DataError, Dataset, load_idx, synth_splits
from .engine import CheckpointError, FingerprintMismatch, read_checkpoint, save_checkpoint
from .engine.gradcheck import run_suite
from .topology import FractalTopology, TopologyError, assemble_network, column_view, structural_stats
from .trainer import TrainingDiverged, anytime_profile, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 2, 3, 4
COMMANDS = ("train", "eval", "extract-column", "inspect", "gradcheck", "anytime-bench")


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and test splits named by ``data.source`` / ``data.test``."""
    kind, _, rest = cfg.data.source.partition(":")
    if kind == "synth":
        seed, n, classes, size = parse_synth(rest)
        return synth_splits(seed, n, classes, size)
    img, lbl = parse_idx(rest)
    train_set = load_idx(img, lbl, split="train", class_count=cfg.arch.classes)
    if cfg.data.test is None:
        return train_set, train_set
    timg, tlbl = parse_idx(cfg.data.test.partition(":")[2])
    test_set = load_idx(timg, tlbl, mean=train_set.channel_mean, split="test",
                        class_count=train_set.class_count)
    return train_set, test_set


def build_network(cfg: RunConfig, shape: tuple[int, int, int] | None = None) -> FractalTopology:
    channels, size, classes = shape if shape is not None else data_shape(cfg.data.source)
    a = cfg.arch
    if size % (1 << a.blocks):
        raise ConfigError(f"spatial size {size} not divisible by 2^{a.blocks}", "data.source")
    return assemble_network(a.columns, a.blocks, a.channel_plan(), a.classes or classes,
                            a.pool_flip, channels, size)


def _resolve_view(net: FractalTopology, fingerprint: bytes, col: int | None) -> FractalTopology:
    """The full network or the column view whose fingerprint matches the checkpoint."""
    candidates = [net] + [column_view(net, c) for c in range(1, net.columns + 1)]
    if col is not None:
        candidates = [column_view(net, col)]
    for cand in candidates:
        if cand.fingerprint == fingerprint:
            return cand
    raise FingerprintMismatch("checkpoint does not match the configured architecture")


def _mask_column(spec: str | None) -> int | None:
    if spec is None or spec == "full":
        return None
    kind, _, col = spec.partition(":")
    if kind != "global" or not col.isdigit():
        raise ConfigError(f"mask must be 'full' or 'global:<c>', got {spec!r}", "--mask")
    return int(col)


def cmd_train(cfg: RunConfig, args) -> int:
    train_set, test_set = load_data(cfg)
    net = build_network(cfg, (train_set.channels, train_set.size, train_set.class_count))
    plan = plan_for(cfg)
    metrics_path = cfg.out.metrics
    ckpt = cfg.out.checkpoint
    sink = open(metrics_path, "w") if metrics_path else None

    def on_epoch(rec, store):
        if sink:
            sink.write(rec.to_json() + "\n")
            sink.flush()
        err = "n/a" if rec.test_error_pct is None else f"{rec.test_error_pct:.2f}%"
        print(f"epoch {rec.epoch:4d}  lr {rec.lr:.2e}  train_loss {rec.train_loss:.4f}  test_error {err}")
        every = cfg.out.checkpoint_every
        if every and (rec.epoch + 1) % every == 0:
            save_checkpoint(ckpt, net, store)

    try:
        store, _ = train(net, plan, train_set, test_set, on_epoch)
    except TrainingDiverged as exc:
        save_checkpoint(ckpt, net, exc.last_good)
        print(f"error: training diverged ({exc}); last good parameters saved to {ckpt}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if sink:
            sink.close()
    save_checkpoint(ckpt, net, store)
    print(f"saved {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    col = _mask_column(args.mask)
    _, test_set = load_data(cfg)
    net = build_network(cfg, (test_set.channels, test_set.size, test_set.class_count))
    if col is not None and not 1 <= col <= net.columns:
        raise ConfigError(f"column {col} out of range 1..{net.columns}", "--mask")
    fp, store = read_checkpoint(cfg.out.checkpoint)
    view = _resolve_view(net, fp, args.col)
    if view.column is not None and col not in (None, view.column):
        raise ConfigError(f"checkpoint holds column {view.column} only", "--mask")
    mask = droppath.global_mask(view, col) if col is not None and view.column is None else None
    r = evaluate(view, store, test_set, mask)
    print(json.dumps({
        "view": "full" if view.column is None else f"column:{view.column}",
        "mask": args.mask or "full",
        "loss": r.loss,
        "error_pct": r.error_pct,
    }))
    return EXIT_OK


def cmd_extract(cfg: RunConfig, args) -> int:
    net = build_network(cfg)
    path = cfg.out.checkpoint
    fp, store = read_checkpoint(path)
    if fp != net.fingerprint:
        raise FingerprintMismatch(f"{path}: not a checkpoint of the configured full network")
    view = column_view(net, args.col)
    out = args.output or f"{path}.col{args.col}"
    save_checkpoint(out, view, store.transplant(view))
    print(f"column {args.col} (depth {structural_stats(view).depth}) saved to {out}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, args) -> int:
    net = build_network(cfg)
    st = structural_stats(net)
    print(f"columns {net.columns}")
    print(f"blocks {net.blocks}")
    print(f"channels {','.join(map(str, net.channel_plan))}")
    print(f"depth {st.depth}")
    print(f"conv_count {st.conv_count}")
    print(f"join_count {st.join_count}")
    print(f"param_count {st.param_count}")
    print(f"flop_count {st.flop_count}")
    for c in range(1, net.columns + 1):
        cs = structural_stats(column_view(net, c))
        print(f"column {c} depth {cs.depth} conv_count {cs.conv_count} flop_count {cs.flop_count}")
    rng = np.random.default_rng(cfg.train.seed)
    for i in range(args.samples):
        m = droppath.sample_mixed(net, rng, cfg.train.local_fraction, cfg.train.local_drop_rate)
        label = m.kind if m.column is None else f"{m.kind}:{m.column}"
        print(f"sample {i} {label} depth {droppath.mask_depth(net, m)}")
        sys.stdout.write(m.dump(net))
    if args.topology:
        sys.stdout.write(net.dump())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_suite(range(args.seeds), args.tolerance)
    by_name: dict[str, list] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    ok = True
    for name, rs in by_name.items():
        worst = max(r.error for r in rs)
        passed = all(r.passed for r in rs)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:24s} max_rel_err {worst:.3e} seeds {len(rs)}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_anytime(cfg: RunConfig, args) -> int:
    _, test_set = load_data(cfg)
    net = build_network(cfg, (test_set.channels, test_set.size, test_set.class_count))
    path = cfg.out.checkpoint
    fp, store = read_checkpoint(path)
    if fp != net.fingerprint:
        raise FingerprintMismatch(f"{path}: not a checkpoint of the configured full network")
    rows = anytime_profile(net, store, test_set)
    if args.json:
        for row in rows:
            print(json.dumps(row))
    else:
        print(f"{'col':>3} {'depth':>5} {'MACs':>12} {'latency_ms':>10} {'loss':>8} {'error_%':>7}")
        for r in rows:
            print(f"{r['column']:>3} {r['depth']:>5} {r['flops']:>12} {1000 * r['wall_latency_s']:>10.2f} "
                  f"{r['loss']:>8.4f} {r['error_pct']:>7.2f}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "extract-column": cmd_extract,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
    "anytime-bench": cmd_anytime,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--data", help="data source: idx:<images>,<labels> or synth:<seed>,<n>,<classes>,<size>")
    common.add_argument("--metrics", help="JSON-lines metrics output")
    common.add_argument("--checkpoint", help="checkpoint path")

    parser = argparse.ArgumentParser(prog="fractalnet", description="Fractal networks with drop-path.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write metrics/checkpoints")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--mask", help="full or global:<c>")
    p.add_argument("--col", type=int, help="treat the checkpoint as column <c>")
    p = sub.add_parser("extract-column", parents=[common], help="save one column as a plain network")
    p.add_argument("--col", type=int, required=True)
    p.add_argument("--output", help="output checkpoint (default <checkpoint>.col<c>)")
    p = sub.add_parser("inspect", parents=[common], help="structure summary and drop-path samples")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--topology", action="store_true", help="also print the node/edge dump")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p = sub.add_parser("anytime-bench", parents=[common], help="per-column latency/accuracy table")
    p.add_argument("--json", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    # overrides may appear on either side of flags, which argparse cannot interleave
    args, extra = parser.parse_known_args(argv)
    stray = [a for a in extra if a.startswith("-") or "=" not in a]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    overrides = list(args.overrides) + extra
    if args.data:
        overrides.append(f"data.source={args.data}")
    if args.metrics:
        overrides.append(f"out.metrics={args.metrics}")
    if args.checkpoint:
        overrides.append(f"out.checkpoint={args.checkpoint}")
    try:
        cfg = load_config(args.config, overrides)
        return HANDLERS[args.command](cfg, args)
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

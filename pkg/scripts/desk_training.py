"""Desk-scale training run with per-column learning curves.

Writes one JSON line per epoch and prints a table of the full network's test
loss next to each column's loss, the data behind a per-column monitoring plot.

    python3 scripts/desk_training.py --epochs 30 --metrics desk.jsonl
"""

import argparse
import time

from fractalnet.dataio import synth_splits
from fractalnet.topology import assemble_network, column_view
from fractalnet.trainer import TrainPlan, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--columns", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-droppath", action="store_true")
    ap.add_argument("--metrics", default=None, help="JSON-lines output")
    args = ap.parse_args()

    train_set, test_set = synth_splits(0, 500, 4, 16, test_per_class=250)
    net = assemble_network(args.columns, 2, (8, 16), 4, input_channels=1, input_size=16)
    plan = TrainPlan(epochs=args.epochs, dropout=(0.0, 0.1), seed=args.seed, droppath=not args.no_droppath)
    sink = open(args.metrics, "w") if args.metrics else None
    cols = " ".join(f"{'col' + str(c):>8}" for c in range(1, net.columns + 1))
    print(f"{'epoch':>5} {'lr':>8} {'train':>8} {'full':>8} {cols} {'err%':>6}")

    def show(rec, _store):
        if sink:
            sink.write(rec.to_json() + "\n")
        per = " ".join(f"{v:8.4f}" if v is not None else f"{'-':>8}" for v in rec.per_column_loss)
        full = f"{rec.test_loss:8.4f}" if rec.test_loss is not None else f"{'-':>8}"
        err = f"{rec.test_error_pct:6.2f}" if rec.test_error_pct is not None else f"{'-':>6}"
        print(f"{rec.epoch:5d} {rec.lr:8.1e} {rec.train_loss:8.4f} {full} {per} {err}", flush=True)

    start = time.perf_counter()
    store, _ = train(net, plan, train_set, test_set, show)
    if sink:
        sink.close()
    deep = column_view(net, net.columns)
    r = evaluate(deep, store.transplant(deep), test_set)
    print(f"deepest column alone: {r.error_pct:.2f}% error; wall time {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()

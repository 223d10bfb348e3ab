"""Structural scaling of fractal networks with the number of columns (B=5).

Prints depth, layer counts, parameters and multiply-accumulates for C=1..6,
and the depth of every column.  Pass --train to also fit small B=2 models on
the synthetic task and report test error per C.
"""

import argparse

from fractalnet.dataio import synth_splits
from fractalnet.topology import assemble_network, column_view, structural_stats
from fractalnet.trainer import TrainPlan, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", action="store_true")
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()

    print(f"{'C':>2} {'depth':>6} {'convs':>6} {'joins':>6} {'params':>10} {'MACs':>12}  column depths")
    for C in range(1, 7):
        net = assemble_network(C, 5, (16, 32, 64, 128, 128), 10)
        s = structural_stats(net)
        depths = [column_view(net, c).depth() for c in range(1, C + 1)]
        print(f"{C:2d} {s.depth:6d} {s.conv_count:6d} {s.join_count:6d} {s.param_count:10d} "
              f"{s.flop_count:12d}  {depths}")

    if args.train:
        train_set, test_set = synth_splits(0, 250, 4, 16)
        print(f"\n{'C':>2} {'depth':>6} {'test err %':>10}")
        for C in range(1, 5):
            net = assemble_network(C, 2, (8, 16), 4, input_channels=1, input_size=16)
            store, _ = train(net, TrainPlan(epochs=args.epochs, dropout=(0.0, 0.1), monitor=False), train_set)
            print(f"{C:2d} {net.depth():6d} {evaluate(net, store, test_set).error_pct:10.2f}", flush=True)


if __name__ == "__main__":
    main()

"""Plain chain networks trained alone versus columns extracted from a fractal network.

For each column c the plain network has exactly column c's layer sequence.
It is trained from scratch, while the fractal network is trained once with
drop-path and then cut into its columns.
"""

import argparse

from fractalnet.dataio import HARD_BARS, BarStyle, synth_splits
from fractalnet.topology import assemble_network, column_view
from fractalnet.trainer import TrainPlan, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--columns", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--hard", action="store_true")
    args = ap.parse_args()

    style = HARD_BARS if args.hard else BarStyle()
    train_set, test_set = synth_splits(0, 250, 4, 16, style=style)
    net = assemble_network(args.columns, 2, (8, 16), 4, input_channels=1, input_size=16)
    plan = TrainPlan(epochs=args.epochs, dropout=(0.0, 0.1), monitor=False)
    store, _ = train(net, plan, train_set)
    print(f"fractal network (C={args.columns}, depth {net.depth()}): "
          f"{evaluate(net, store, test_set).error_pct:.2f}% error")
    print(f"{'col':>3} {'depth':>5} {'plain %':>8} {'extracted %':>12}")
    for c in range(1, args.columns + 1):
        view = column_view(net, c)
        extracted = evaluate(view, store.transplant(view), test_set).error_pct
        # a plain net is a one-column fractal of the same depth
        plain_plan = TrainPlan(epochs=args.epochs, dropout=(0.0, 0.1), monitor=False, droppath=False)
        plain_store, _ = train(view, plain_plan, train_set)
        plain = evaluate(view, plain_store, test_set).error_pct
        print(f"{c:3d} {view.depth():5d} {plain:8.2f} {extracted:12.2f}", flush=True)


if __name__ == "__main__":
    main()

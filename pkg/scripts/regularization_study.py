"""Drop-path versus no drop-path on a 500-sample training subset.

    python3 scripts/regularization_study.py --seeds 5
    python3 scripts/regularization_study.py --seeds 3 --hard   # short, dim bars
"""

import argparse

import numpy as np

from fractalnet.dataio import HARD_BARS, BarStyle, synth_splits
from fractalnet.topology import assemble_network
from fractalnet.trainer import TrainPlan, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--subset", type=int, default=500)
    ap.add_argument("--hard", action="store_true", help="use the harder bar style")
    ap.add_argument("--dropout", type=float, nargs=2, default=(0.0, 0.1))
    args = ap.parse_args()

    style = HARD_BARS if args.hard else BarStyle()
    train_set, test_set = synth_splits(0, 500, 4, 16, test_per_class=250, style=style)
    subset = train_set.subset(args.subset)
    net = assemble_network(3, 2, (8, 16), 4, input_channels=1, input_size=16)
    print(f"{'seed':>4} {'drop-path %':>12} {'none %':>8} {'train loss dp/none':>20}")
    gaps = []
    for seed in range(args.seeds):
        row = []
        for use_dp in (True, False):
            plan = TrainPlan(epochs=args.epochs, dropout=tuple(args.dropout), seed=seed,
                             droppath=use_dp, monitor=False)
            store, recs = train(net, plan, subset)
            row.append((evaluate(net, store, test_set).error_pct, recs[-1].train_loss))
        (e_dp, l_dp), (e_no, l_no) = row
        gaps.append(e_dp - e_no)
        print(f"{seed:4d} {e_dp:12.2f} {e_no:8.2f} {l_dp:9.4f}/{l_no:.4f}", flush=True)
    wins = sum(g <= 1.0 for g in gaps)
    print(f"mean gap (dp - none) {np.mean(gaps):+.2f} points; dp within +1 point in {wins}/{len(gaps)} seeds")


if __name__ == "__main__":
    main()

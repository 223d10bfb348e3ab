"""Distribution of active depth under drop-path versus stochastic depth.

Drop-path depths come from sampling masks on a C=4, B=5 fractal network.
Stochastic depth drops each of L residual layers independently with the
linearly decaying survival rule p_l = 1 - (l / L) * (1 - p_L); its active
depth is a Poisson-binomial variable, computed exactly by convolution.
"""

import argparse
from collections import Counter

import numpy as np

from fractalnet import droppath
from fractalnet.topology import assemble_network


def stochastic_depth_pmf(L: int, p_last: float) -> np.ndarray:
    pmf = np.array([1.0])
    for l in range(1, L + 1):
        p = 1 - l / L * (1 - p_last)
        pmf = np.convolve(pmf, [1 - p, p])
    return pmf


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--p-last", type=float, default=0.5)
    args = ap.parse_args()

    net = assemble_network(4, 5, (1,) * 5, 2, input_channels=1, input_size=32)
    rng = np.random.default_rng(0)
    depths = Counter(droppath.mask_depth(net, droppath.sample_mixed(net, rng)) for _ in range(args.samples))
    print("drop-path (mixed 50/50, local rate 0.15), longest active path:")
    for d in sorted(depths):
        print(f"  depth {d:3d}: {depths[d] / args.samples:7.4f}")

    L = net.depth()
    pmf = stochastic_depth_pmf(L, args.p_last)
    mean = float(np.arange(L + 1) @ pmf)
    std = float(np.sqrt((np.arange(L + 1) ** 2) @ pmf - mean ** 2))
    lo, hi = np.flatnonzero(pmf > 1e-3)[[0, -1]]
    print(f"stochastic depth over {L} layers (p_L={args.p_last}): mean {mean:.1f}, std {std:.1f}, "
          f"depths with probability > 1e-3 lie in [{lo}, {hi}]")
    print(f"drop-path depths span {min(depths)}..{max(depths)}, ratio {max(depths) / min(depths):.0f}x")


if __name__ == "__main__":
    main()

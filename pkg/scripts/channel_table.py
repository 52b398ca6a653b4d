#!/usr/bin/env python3
"""Print uplink statistics over a distance grid: path loss, deterministic
SNR, and Monte-Carlo percentiles of the per-window token budget."""

import argparse
import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pwcmoe import channel as ch
from pwcmoe.rng import RngStream


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--distances", default="50,100,200,400,800,1600,6400,25600")
    parser.add_argument("--draws", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bits-per-token", type=int, default=512,
                        help="payload per token (default: 32-dim x 16 bit)")
    args = parser.parse_args()

    print(f"{'d_c (m)':>10} {'PL (dB)':>9} {'SNR (dB)':>9} "
          f"{'m_ul p10':>9} {'median':>7} {'p90':>7}")
    for i, d in enumerate(float(x) for x in args.distances.split(",")):
        params = ch.ChannelParams(d_c_m=d, bits_per_token=args.bits_per_token)
        pl = ch.path_loss_db(params.f_c_ghz, d)
        snr = ch.snr_linear(ch.channel_gain(pl, 1.0, 1.0), params)
        snr_db = 10 * math.log10(snr) if snr > 0 else float("-inf")
        draws = ch.budget_samples(params, RngStream(args.seed, f"table/d{i}"),
                                  args.draws)
        p10, med, p90 = np.percentile(draws, [10, 50, 90])
        print(f"{d:>10.0f} {pl:>9.2f} {snr_db:>9.2f} "
              f"{p10:>9.0f} {med:>7.0f} {p90:>7.0f}")


if __name__ == "__main__":
    main()

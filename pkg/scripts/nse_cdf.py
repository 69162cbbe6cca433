"""Empirical CDF of the final NSE at n = 100 and n = 500 (n/m = 2)."""
import os

import numpy as np

from _common import parse_args, write_rows
from relaxed_bp.scalar_io import GaussBernoulli
from relaxed_bp.sim_harness import ExperimentSpec, run_experiment


def main():
    args = parse_args(__doc__)
    rows = []
    for n in (100, 500):
        spec = ExperimentSpec(n=n, beta=2.0, prior=GaussBernoulli(0.1), channel={"kind": "awgn"}, snr_db=10.0,
                              trials=args.trials, seed=args.seed, threads=args.threads,
                              algorithms=("rbp_simplified", "se_predict"))
        rep = run_experiment(spec)
        v, p = rep.cdf["rbp_simplified"]
        rows += [[n, f"{a:.4f}", f"{b:.6f}"] for a, b in zip(v, p)]
        lo, hi = np.percentile(v, [10, 90])
        print(f"n={n}: 10-90% range {hi - lo:.2f} dB, SE {rep.se_curve[-1]:.2f} dB")
    write_rows(os.path.join(args.out, "nse_cdf", "cdf.csv"), ["n", "nse_db", "empirical_prob"], rows)


if __name__ == "__main__":
    main()

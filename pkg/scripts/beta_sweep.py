"""Final median NSE against n/m at n = 100: relaxed BP, linear MMSE and both SE branches."""
import os

import numpy as np

from _common import parse_args, write_rows
from relaxed_bp.scalar_io import GaussBernoulli
from relaxed_bp.sim_harness import ExperimentSpec, run_experiment


def main():
    args = parse_args(__doc__)
    rows = []
    for beta in np.arange(0.5, 3.01, 0.25):
        spec = ExperimentSpec(n=100, beta=float(beta), prior=GaussBernoulli(0.1), channel={"kind": "awgn"},
                              snr_db=10.0, trials=args.trials, seed=args.seed, threads=args.threads,
                              algorithms=("rbp_simplified", "lmmse", "se_predict"))
        rep = run_experiment(spec)
        fp = rep.se_summary
        row = [f"{beta:.2f}", rep.median_nse_db["rbp_simplified"][-1], rep.median_nse_db["lmmse"][-1],
               fp["nse_db_hi"], fp["nse_db_lo"], fp["unique"]]
        rows.append([row[0]] + [f"{v:.4f}" for v in row[1:5]] + [row[5]])
        print(" ".join(map(str, rows[-1])))
    write_rows(os.path.join(args.out, "beta_sweep", "beta_sweep.csv"),
               ["beta", "rbp_median_db", "lmmse_median_db", "se_hi_db", "se_lo_db", "unique"], rows)


if __name__ == "__main__":
    main()

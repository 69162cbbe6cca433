"""Median NSE against iteration for n in {100, 500} and n/m in {2, 3}, with the SE prediction."""
import os

from _common import parse_args, write_rows
from relaxed_bp.scalar_io import GaussBernoulli
from relaxed_bp.sim_harness import ExperimentSpec, run_experiment, write_report


def main():
    args = parse_args(__doc__)
    rows = []
    for beta in (2.0, 3.0):
        for n in (100, 500):
            spec = ExperimentSpec(n=n, beta=beta, prior=GaussBernoulli(0.1), channel={"kind": "awgn"},
                                  snr_db=10.0, trials=args.trials, seed=args.seed, threads=args.threads,
                                  algorithms=("rbp_simplified", "se_predict"))
            rep = run_experiment(spec)
            write_report(rep, os.path.join(args.out, "nse_vs_iteration", f"n={n}_beta={beta}"))
            for t, (sim, pred) in enumerate(zip(rep.median_nse_db["rbp_simplified"], rep.se_curve)):
                rows.append([n, beta, t, f"{sim:.4f}", f"{pred:.4f}"])
            print(f"n={n} beta={beta}: median {rep.median_nse_db['rbp_simplified'][-1]:.2f} dB, "
                  f"SE {rep.se_curve[-1]:.2f} dB")
    write_rows(os.path.join(args.out, "nse_vs_iteration", "curves.csv"), ["n", "beta", "t", "median_nse_db", "se_nse_db"], rows)


if __name__ == "__main__":
    main()

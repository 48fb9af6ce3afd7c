"""STGCN accuracy versus observation window length (1 to 4 s of history)."""

import argparse
import logging

from gridpredict.evaluate import observation_window_sweep
from gridpredict.experiments import DESK_STGCN, simulate_desk_data


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--windows", type=int, nargs="+", default=[50, 100, 150, 200])
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--horizon", type=int, default=500)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = simulate_desk_data(seed=args.seed, n_test=args.n_test)
    rows = observation_window_sweep(data.train, data.test, args.windows, DESK_STGCN, data.graph, args.horizon)
    print(f"{'M':>5}{'seconds':>9}{'median worst RMSE (mHz)':>26}")
    for r in rows:
        print(f"{r['M']:>5}{r['seconds']:>9.1f}{1e3 * r['rmse_worst_median']:>26.3f}")


if __name__ == "__main__":
    main()

"""deepDMD accuracy along one hyperparameter axis (layers, width, activation, batch)."""

import argparse
import logging

from gridpredict.config import TRAIN_START
from gridpredict.evaluate import SWEEP_AXES, hyperparameter_sweep
from gridpredict.experiments import simulate_desk_data
from gridpredict.koopman import DeepDMDConfig, build_snapshot_matrices

DEFAULT_VALUES = {"layers": [1, 2, 3], "width": [8, 16, 32], "activation": ["tanh", "relu", "sigmoid"],
                  "batch": [32, 128, "full"]}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--axis", choices=SWEEP_AXES, default="activation")
    p.add_argument("--values", nargs="+", help="values along the axis (defaults depend on the axis)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--origin", type=int, default=199)
    p.add_argument("--horizon", type=int, default=500)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    values = args.values or DEFAULT_VALUES[args.axis]
    if args.axis != "activation":
        values = [v if v == "full" else int(v) for v in values]
    data = simulate_desk_data(seed=args.seed)
    pair = build_snapshot_matrices(data.train, skip=TRAIN_START)
    rows = hyperparameter_sweep(pair, args.axis, values, data.test, DeepDMDConfig(epochs=args.epochs),
                                args.origin, args.horizon)
    for r in rows:
        print(f"{args.axis}={r['value']!s:<10} median worst RMSE {1e3 * r['rmse_worst_median']:.3f} mHz"
              f"  final loss {r['final_loss']:.4g}")


if __name__ == "__main__":
    main()

"""Accuracy curves for FedAvg, FedPA, FedEP and FedSEP on one data seed.

All runs share 50 FedAvg burn-in rounds, so the curves coincide until the
handoff. The table reports how many rounds each strategy needs for its
100-round running accuracy to reach FedAvg's final running accuracy.
Takes about a minute per strategy.

    python demos/compare_strategies.py [--seed 0] [--rounds 300]
"""

import argparse
from pathlib import Path

import numpy as np

from fedep.config import parse_config
from fedep.simulator import rounds_to_threshold, run_experiment, running_average

CONFIG = Path(__file__).with_name("configs") / "benchmark.ini"


def accuracy(strategy, seed, rounds):
    overrides = {"strategy": strategy, "seed": str(seed), "data_seed": str(seed), "rounds": str(rounds)}
    if strategy == "fedavg":
        overrides["damping"] = "1.0"
    trace, report = run_experiment(parse_config(CONFIG.read_text(), overrides))
    return np.array([m.eval_accuracy for m in trace]), report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int, default=300)
    args = ap.parse_args()

    curves, reports = {}, {}
    for strategy in ("fedavg", "fedpa", "fedep", "fedsep"):
        curves[strategy], reports[strategy] = accuracy(strategy, args.seed, args.rounds)
        print(f"finished {strategy}", flush=True)

    target = running_average(curves["fedavg"], 100)[-1]
    r_avg = rounds_to_threshold(curves["fedavg"], target, 100)
    checkpoints = [r for r in (50, 60, 80, 100, 150, 200, 300) if r <= args.rounds]
    print(f"\ntarget accuracy {target:.3f} (FedAvg reaches it at round {r_avg})")
    print(f"{'strategy':<8} " + " ".join(f"{'r' + str(r):>6}" for r in checkpoints) + "  rounds  ratio  ece15")
    for strategy, acc in curves.items():
        r = rounds_to_threshold(acc, target, 100)
        ratio = f"{r / r_avg:5.2f}" if r else "  n/a"
        cells = " ".join(f"{acc[c - 1]:6.3f}" for c in checkpoints)
        print(f"{strategy:<8} {cells}  {str(r):>6}  {ratio}  {reports[strategy].ece15_point:.3f}")


if __name__ == "__main__":
    main()

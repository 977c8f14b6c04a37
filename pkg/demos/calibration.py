"""Point versus posterior-marginal predictions after a short FedEP run.

The mode of the global approximation gives point predictions; averaging
class probabilities over draws from the approximation gives marginal
predictions. Prints ECE-15 for both and a reliability table.

    python demos/calibration.py [--backend laplace] [--samples 20]
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from fedep import gaussian as G
from fedep import models as M
from fedep import protocol as P
from fedep.config import parse_config
from fedep.simulator import PREDICT_STREAM, build, child_rng, ece, marginalized_predict, run_experiment

CONFIG = """
[experiment]
strategy = fedep
rounds = 40
burn_in = 10
clients_per_round = 10
damping = 0.1
burn_in_damping = 1.0
[data]
n_clients = 20
examples_per_client = 60
num_classes = 5
input_dim = 8
heterogeneity = 0.2
label_noise = 0.2
[inference]
client_lr = 0.01
client_epochs = 5
alpha_cov = 10.0
[optimizer]
server_momentum = 0.0
"""


def reliability(probs, labels, n_bins=10):
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            rows.append((b / n_bins, (b + 1) / n_bins, int(mask.sum()), conf[mask].mean(), correct[mask].mean()))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--backend", default="laplace", choices=["scaled-identity", "mcmc", "laplace", "ngvi"])
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    overrides = {"backend": args.backend, "seed": str(args.seed), "marginal_samples": str(args.samples)}
    cfg = parse_config(CONFIG, {**overrides, "checkpoint_interval": "40"})
    with tempfile.TemporaryDirectory() as tmp:
        _, report = run_experiment(cfg, checkpoint_dir=tmp)
        server, _ = P.load_checkpoint(Path(tmp) / f"checkpoint_{cfg.rounds:06d}.json")
    print(f"backend {args.backend}: point accuracy {report.point_accuracy:.3f}, marginal {report.marginal_accuracy:.3f}")
    print(f"ECE-15 point {report.ece15_point:.4f}, marginal {report.ece15_marginal:.4f}")

    setup = build(cfg, cfg.seed)
    q, test = server.q_global, setup.test
    point = M.predict_proba(setup.spec, G.mode(q), test.x)
    marginal = marginalized_predict(q, setup.spec, test.x, args.samples, child_rng(cfg.seed, PREDICT_STREAM))
    for name, probs in (("point", point), ("marginal", marginal)):
        print(f"\n{name} predictions, ECE-15 {ece(probs, test.y):.4f}")
        print(f"{'bin':>11} {'n':>5} {'conf':>6} {'acc':>6}")
        for lo, hi, n, c, a in reliability(probs, test.y):
            print(f"{lo:.1f}-{hi:.1f}".rjust(11) + f" {n:5d} {c:6.3f} {a:6.3f}")

if __name__ == "__main__":
    main()

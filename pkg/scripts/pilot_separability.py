"""Brute-force ceiling for window classification on the synthetic generator.

A window model that pools over patches cannot tell *where* in the L-epoch window a
waveform sits, only which stages are present and in what proportion. The best such
classifier, given perfect waveform detection, predicts the most frequent last-epoch
label for each bag of stage counts. This script measures that ceiling on many
simulated label chains, which bounds what the accuracy thresholds can demand.

Two further references: a multinomial logistic regression on per-stage
[presence, proportion] features (what a linear head on ideal Scores can reach) and
a majority vote over the window's epochs (a model that only uses proportions).

    python scripts/pilot_separability.py --subjects 400 --epochs 200
"""

import argparse
from collections import Counter, defaultdict

import numpy as np
import torch

from protosleep.evaluation import confusion, metrics
from protosleep.synth import SynthConfig, stage_sequence, stationary_distribution


def bag_ceiling(seqs, L):
    table = defaultdict(Counter)
    rows = []
    for seq in seqs:
        for i in range(len(seq) - L + 1):
            bag = tuple(np.bincount(seq[i : i + L], minlength=5))
            table[bag][int(seq[i + L - 1])] += 1
            rows.append((bag, int(seq[i + L - 1])))
    best = {bag: max(sorted(c), key=lambda k: c[k]) for bag, c in table.items()}
    y = [lab for _, lab in rows]
    p = [best[bag] for bag, _ in rows]
    return metrics(confusion(y, p))


def bag_features(seqs, L):
    X, y = [], []
    for seq in seqs:
        for i in range(len(seq) - L + 1):
            c = np.bincount(seq[i : i + L], minlength=5)
            X.append(np.concatenate([c > 0, c / L]))
            y.append(int(seq[i + L - 1]))
    return np.array(X, dtype=np.float64), np.array(y)


def linear_ceiling(seqs, L):
    X, y = bag_features(seqs, L)
    X, yt = torch.from_numpy(X), torch.from_numpy(y)
    lin = torch.nn.Linear(X.shape[1], 5).double()
    opt = torch.optim.LBFGS(lin.parameters(), max_iter=500)

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(lin(X), yt)
        loss.backward()
        return loss

    for _ in range(5):
        opt.step(closure)
    with torch.no_grad():
        return metrics(confusion(y, lin(X).argmax(1).numpy()))


def majority_vote(seqs, L):
    X, y = bag_features(seqs, L)
    return metrics(confusion(y, X[:, 5:].argmax(1)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--subjects", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--window-len", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = SynthConfig()
    rng = np.random.default_rng(args.seed)
    seqs = [stage_sequence(args.epochs, cfg.transitions, rng, cfg.dwell_range) for _ in range(args.subjects)]
    print("stationary distribution:", np.round(stationary_distribution(cfg.transitions, cfg.dwell_range), 4))
    counts = np.bincount(np.concatenate(seqs), minlength=5)
    print("empirical distribution: ", np.round(counts / counts.sum(), 4))
    for L in sorted({1, args.window_len}):
        rep = bag_ceiling(seqs, L)
        print(f"L={L}: ceiling ACC={rep.acc:.4f} MF1={rep.mf1:.4f} kappa={rep.kappa:.4f}")
        print("   per-class F1:", np.round(rep.f1, 4))
        lin, maj = linear_ceiling(seqs, L), majority_vote(seqs, L)
        print(f"   linear on [presence, proportion]: ACC={lin.acc:.4f} MF1={lin.mf1:.4f}")
        print(f"   majority vote: ACC={maj.acc:.4f} MF1={maj.mf1:.4f}")


if __name__ == "__main__":
    main()

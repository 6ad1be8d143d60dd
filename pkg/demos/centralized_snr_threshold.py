#!/usr/bin/env python3
"""Train a small centralized classifier on frames above an SNR threshold.

Shows the data path end to end: synthesize a pool, keep frames at or above
``--theta`` dB, train the CNN and report accuracy per test SNR.

    python3 demos/centralized_snr_threshold.py --theta -8 --epochs 10
"""
import argparse

import numpy as np

from fedamc import datastore, neuralnet as nn

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--theta", type=int, default=-8)
parser.add_argument("--epochs", type=int, default=10)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

schemes = (0, 1, 4, 7)
pool = datastore.generate_dataset(schemes, frames_per_cell=60, seed=args.seed)
test = datastore.generate_dataset(schemes, frames_per_cell=20, seed=args.seed, index_offset=1_000_000)
train = datastore.filter_by_snr(pool, args.theta)
print(f"{len(train)} training frames at >= {args.theta} dB, {len(test)} test frames")

model = nn.init_model(nn.default_architecture(len(schemes)), args.seed)
opt = nn.OptimizerState("adam", 1e-3)
rng = np.random.default_rng(args.seed)
for epoch in range(1, args.epochs + 1):
    nn.fit(model, train.iq, train.labels, 1, 32, opt, rng)
    ev = nn.evaluate(model, test)
    print(f"epoch {epoch:2d}  test accuracy {ev.accuracy:.3f}  loss {ev.loss:.3f}")

print("accuracy by SNR:")
for snr, acc in sorted(ev.per_snr_accuracy.items()):
    print(f"  {snr:4d} dB  {acc:.3f}  " + "#" * int(40 * acc))

#!/usr/bin/env python3
"""Watch a replay queue keep its class mix near uniform.

A client receives skewed batches each round.  Eviction removes frames of the
most over-represented class, oldest first, until the queue fits its capacity
without moving further from a uniform label distribution.
"""
import numpy as np

from fedamc.datastore import Dataset, ReplayQueue, js_divergence

rng = np.random.default_rng(0)
classes, capacity = 4, 40
queue = ReplayQueue(capacity, classes, frame_length=8)
uniform = np.full(classes, 1 / classes)
for rnd in range(1, 9):
    weights = rng.dirichlet(np.full(classes, 0.4))
    labels = rng.choice(classes, 25, p=weights)
    batch = Dataset(np.zeros((25, 2, 8), np.float32), labels, np.zeros(25, int), classes)
    queue.insert(batch, rnd)
    incoming = np.bincount(labels, minlength=classes)
    removed = queue.evict()
    counts = queue.counts()
    print(f"round {rnd}: batch {incoming}  evicted {len(removed):2d}  queue {counts}  "
          f"JS(batch, uniform)={js_divergence(incoming / 25, uniform):.3f}  "
          f"JS(queue, uniform)={queue.divergence():.3f}")

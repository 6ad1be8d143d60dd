#!/usr/bin/env python3
"""Project frames onto three principal axes and show how SNR spreads them.

Prints the explained variance and, per SNR, the centroid spread of the four
classes in PCA space.  Low-SNR classes collapse onto one cloud.
"""
import numpy as np

from fedamc import datastore
from fedamc.experiments import pca_project

schemes = (0, 1, 4, 7)
ds = datastore.generate_dataset(schemes, snrs=(-20, -10, 0, 10, 18), frames_per_cell=80, seed=1)
res = pca_project(ds, 3)
print("explained variance ratio:", np.round(res.explained_ratio, 4))
for snr in (-20, -10, 0, 10, 18):
    at = ds.snr_db == snr
    cents = np.array([res.projections[at & (ds.labels == c)].mean(axis=0) for c in range(len(schemes))])
    spread = np.linalg.norm(cents - cents.mean(axis=0), axis=1).mean()
    print(f"{snr:4d} dB  mean class-centroid distance {spread:.3f}")

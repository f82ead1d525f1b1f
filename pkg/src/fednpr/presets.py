"""Named experiment presets modelled on the two benchmark settings.

``isic-like``: 6 clients, 8 classes, a fixed client-by-class count matrix
shaped like the Fed-ISIC2019 site statistics (scaled by 1/8, nonzero cells
kept at >= 1, missing classes kept missing).

``ich-like``: 10 clients, 5 classes with hemorrhage-like global counts
(~2.9k samples), per-class Dirichlet alphas (0.5, 5, 10, 30, 50) for classes
0..4 and class removal with probability 0.3. Clients here hold only a few
hundred samples, so five local epochs per round keep the number of local
optimiser steps per round in a useful range.
"""

from __future__ import annotations

import numpy as np

ISIC_SITE_COUNTS = np.array([
    [342, 803, 296, 109, 490, 30, 3, 18],
    [2857, 4206, 2809, 737, 1138, 124, 111, 431],
    [215, 415, 0, 0, 189, 0, 0, 0],
    [680, 1832, 211, 21, 475, 51, 82, 11],
    [67, 350, 5, 0, 10, 4, 3, 0],
    [24, 3720, 2, 0, 124, 30, 43, 0],
])


def isic_counts(scale: float = 1 / 8) -> np.ndarray:
    scaled = np.rint(ISIC_SITE_COUNTS * scale).astype(int)
    return np.where(ISIC_SITE_COUNTS > 0, np.maximum(scaled, 1), 0)


# Epidural, Intraparenchymal, Intraventricular, Subarachnoid, Subdural
ICH_CLASS_COUNTS = (64, 593, 379, 627, 1231)
ICH_ALPHAS = (0.5, 5.0, 10.0, 30.0, 50.0)

PRESETS = {
    "isic-like": {
        "federation": {"n_clients": 6, "sub_clusters": 4, "npr_weight": 0.1},
        "data": {"n_classes": 8, "samples_per_class": [int(v) for v in isic_counts().sum(axis=0)]},
        "partition": {"n_clients": 6, "count_matrix": isic_counts().tolist()},
    },
    "ich-like": {
        "federation": {"n_clients": 10, "sub_clusters": 2, "npr_weight": 0.3, "local_epochs": 5},
        "data": {"n_classes": 5, "samples_per_class": list(ICH_CLASS_COUNTS)},
        "partition": {"n_clients": 10, "dirichlet_alpha_per_class": list(ICH_ALPHAS), "missing_class_prob": 0.3},
    },
}

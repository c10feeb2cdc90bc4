"""Monotone repair of predicted PSD curves."""

from __future__ import annotations

import numpy as np


def pool_adjacent_violators(values, weights=None) -> np.ndarray:
    """Least-squares non-decreasing fit of a 1-D sequence."""
    y = np.asarray(values, dtype=float).ravel()
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).ravel()
    means, wsum, counts = [], [], []
    for v, wt in zip(y, w):
        means.append(v)
        wsum.append(wt)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), wsum.pop(), counts.pop()
            total = wsum[-1] + w2
            means[-1] = (means[-1] * wsum[-1] + m2 * w2) / total
            wsum[-1] = total
            counts[-1] += c2
    return np.repeat(means, counts)


def project_psd(pred, lower: float = 0.0, upper: float = 100.0) -> np.ndarray:
    """Euclidean projection of each row onto non-decreasing vectors within [lower, upper].

    The isotonic fit is computed first and clipped afterwards; clipping an
    isotonic fit keeps it monotone and lands on the constrained optimum,
    whereas clipping first can pull pooled blocks away from it.
    """
    arr = np.asarray(pred, dtype=float)
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim else arr.reshape(1, 1)
    out = np.array([np.clip(pool_adjacent_violators(r), lower, upper) for r in rows])
    return out.reshape(arr.shape)

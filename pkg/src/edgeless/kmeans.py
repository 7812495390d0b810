"""Lloyd's k-means with k-means++ seeding and best-of-runs selection."""
from __future__ import annotations

import numpy as np


def _sq_distances(points: np.ndarray, centres: np.ndarray) -> np.ndarray:
    delta = points[:, None, :] - centres[None, :, :]
    return np.einsum("ikq,ikq->ik", delta, delta)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Choose ``k`` initial centres by D^2 sampling."""
    n = len(points)
    centres = np.empty((k, points.shape[1]))
    centres[0] = points[rng.integers(n)]
    closest = _sq_distances(points, centres[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            # every point coincides with a centre already
            idx = rng.integers(n)
        centres[j] = points[idx]
        closest = np.minimum(closest, _sq_distances(points, centres[j : j + 1])[:, 0])
    return centres


def lloyd(points: np.ndarray, centres: np.ndarray, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float]:
    """Run Lloyd iterations until the assignment is stable.

    Returns ``(labels, centres, sse)``. Empty clusters keep their centre.
    """
    centres = centres.copy()
    labels = None
    for _ in range(max_iter):
        new_labels = np.argmin(_sq_distances(points, centres), axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centres)):
            members = labels == j
            if members.any():
                centres[j] = points[members].mean(axis=0)
    sse = float(_sq_distances(points, centres)[np.arange(len(points)), labels].sum())
    return labels, centres, sse


def kmeans(points, k: int, runs: int = 10, seed=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Best of ``runs`` k-means++ initialised Lloyd runs (smallest SSE).

    Returns 0-based ``labels``, ``centres`` and the sum of squared distances.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if runs < 1:
        raise ValueError("runs must be at least one")
    if k < 1 or k > len(points):
        raise ValueError(f"cannot form {k} clusters from {len(points)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(runs):
        result = lloyd(points, kmeans_plusplus(points, k, rng))
        if best is None or result[2] < best[2]:
            best = result
    return best

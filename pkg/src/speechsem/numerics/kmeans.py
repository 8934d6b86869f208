from __future__ import annotations

import numpy as np


def kmeans(points, k: int, iters: int = 25, seed: int = 0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids k x D, assignment per point, objective after each iteration).
    The objective (sum of squared distances) never increases.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(1))

    history = []
    assign = None
    for _ in range(max(1, iters)):
        dist = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
        new_assign = dist.argmin(1)
        history.append(float(dist[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(0)
    dist = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
    assign = dist.argmin(1)
    history.append(float(dist[np.arange(n), assign].sum()))
    return centroids, assign, history


def assign_clusters(points, centroids) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    return ((x[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(1)

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..seeding import rng_for


@dataclass
class ClusterResult:
    labels: np.ndarray
    k: int
    inertia: float
    seed: int
    n_init: int
    centers: np.ndarray


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass sits on chosen centres; fall back to uniform
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers, dtype=np.float64)


def _lloyd(X, C, max_iter, tol):
    k = len(C)
    for _ in range(max_iter):
        labels = np.argmin(_sqdist(X, C), axis=1)
        new = np.empty_like(C)
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(0)
            else:
                # re-seed at the point farthest from its own centre
                far = int(np.argmax(((X - C[labels]) ** 2).sum(1)))
                new[j] = X[far]
                labels[far] = j
        shift = np.sqrt(((new - C) ** 2).sum(1)).max()
        C = new
        if shift < tol:
            break
    labels = np.argmin(_sqdist(X, C), axis=1)
    for j in range(k):
        if not (labels == j).any():
            far = int(np.argmax(((X - C[labels]) ** 2).sum(1)))
            labels[far] = j
            C[j] = X[far]
    inertia = float(((X - C[labels]) ** 2).sum())
    return labels, C, inertia


def kmeans(X: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300,
           tol: float = 1e-6) -> ClusterResult:
    """k-means++ seeding, Lloyd iterations, best of ``n_init`` restarts by inertia."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    best = None
    for r in range(n_init):
        C0 = _plusplus(X, k, rng_for(seed, "kmeans", r))
        labels, C, inertia = _lloyd(X, C0, max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, C, inertia)
    labels, C, inertia = best
    return ClusterResult(labels.astype(np.int64), k, inertia, seed, n_init, C)


def pca(X: np.ndarray, n_components: int) -> np.ndarray:
    """Centred principal-component scores; each component's sign makes its largest loading positive."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    n_components = min(n_components, *Xc.shape)
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    Vt = Vt[:n_components]
    sign = np.sign(Vt[np.arange(len(Vt)), np.argmax(np.abs(Vt), axis=1)])
    sign[sign == 0] = 1.0
    return Xc @ (Vt * sign[:, None]).T
